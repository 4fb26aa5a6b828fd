//! Synthetic corpus with controlled hard/easy out-of-domain structure.
//!
//! The generator builds a unit-sphere geometry in which the difficulty of
//! each negative class is a design property, not an accident of sampling:
//!
//! * **ID clusters** — orthonormal centers; anchors sit on a shell around
//!   their center at radius (geodesic angle) `r ~ U[0.57h, 1.57h]` where
//!   `h` is the hard-perturbation angle.
//! * **Positives** — small rotations of their anchor, at an angle drawn
//!   from `[0.1h, 0.5h)`, strictly inside half the hard angle so the
//!   reciprocal-nearest-neighbour filter recovers the constructed pairs.
//! * **Hard negatives** — rotated exactly `h` away from their anchor along
//!   a direction composed so that the negative's angle to the cluster
//!   center **equals the anchor's own radius**. Radius alone therefore
//!   carries zero signal about hardness; what distinguishes a hard negative
//!   is its component along a per-cluster *confusion direction* `u_c`,
//!   scaled by a per-item strength `α ~ U[0,1]`. A model only learns to
//!   reject hard negatives if training actually exposes them (they are
//!   invisible to easy/mid-range supervision), and the `α ≈ 0` tail keeps
//!   even a perfectly trained detector below a ceiling.
//! * **Easy OOD** — shells around centers at least
//!   `easy_ood_separation_angle + 0.2` rad from every ID center; every
//!   emitted item is additionally verified to lie at ≥ the separation angle
//!   from all ID centers.
//! * **Mid pool** — items whose cosine to their ID center is uniform in
//!   `mid_band`: between the ID shell and the easy caps.
//! * **Reserve** — uniform in-domain filler drawn with the anchor law.
//!
//! Determinism: each phase consumes its own derived stream, so the corpus
//! is byte-identical for a given spec and the phases cannot perturb one
//! another.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, Role, RowRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// Anchor shell radius, in units of the hard angle. The lower factor must
/// exceed 0.5 so that `tan(h/2) < tan(r)` and the radius-preserving
/// hard-negative frame below is realisable for every anchor.
const RADIUS_LO_FACTOR: f64 = 0.57;
const RADIUS_HI_FACTOR: f64 = 1.57;

/// Positive rotation angle, in units of the hard angle; upper end strictly
/// below 0.5 via half-open sampling.
const POSITIVE_LO_FACTOR: f64 = 0.1;
const POSITIVE_HI_FACTOR: f64 = 0.5;

/// Extra slack (radians) beyond the easy separation angle when placing OOD
/// cluster centers, so item-level jitter cannot eat the guarantee.
const OOD_CENTER_MARGIN: f64 = 0.2;

/// Minimum pairwise angle between OOD cluster centers.
const OOD_CENTER_SPREAD: f64 = 0.8;

/// Rejection-sampling budget per drawn object before giving up.
const MAX_ATTEMPTS: usize = 10_000;

/// Generation parameters. Angles in radians, bands in cosine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_id_clusters: usize,
    pub n_ood_clusters: usize,
    pub n_anchors: usize,
    pub n_easy_ood: usize,
    pub n_mid_pool: usize,
    pub n_reserve: usize,
    pub hard_perturbation_angle: f64,
    pub easy_ood_separation_angle: f64,
    pub mid_band: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 1024,
            n_id_clusters: 5,
            n_ood_clusters: 3,
            n_anchors: 2000,
            n_easy_ood: 2000,
            n_mid_pool: 4000,
            n_reserve: 2000,
            hard_perturbation_angle: 0.35,
            easy_ood_separation_angle: 1.2,
            mid_band: (0.5, 0.8),
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InfeasibleGeometry(msg));
        if self.dim < 8 {
            return fail(format!("dim {} < 8", self.dim));
        }
        if self.n_id_clusters == 0 || self.n_anchors == 0 {
            return fail("need at least one ID cluster and one anchor".into());
        }
        if self.n_easy_ood > 0 && self.n_ood_clusters == 0 {
            return fail("easy-OOD items requested but n_ood_clusters = 0".into());
        }
        let h = self.hard_perturbation_angle;
        let e = self.easy_ood_separation_angle;
        if !(h > 0.0 && h < e && e < std::f64::consts::FRAC_PI_2) {
            return fail(format!(
                "need 0 < hard ({h}) < easy separation ({e}) < pi/2"
            ));
        }
        let (lo, hi) = self.mid_band;
        if !(lo < hi && (-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi)) {
            return fail(format!("mid_band ({lo}, {hi}) is not an increasing cosine band"));
        }
        // Orthonormal ID centers plus a complement direction per OOD center
        // must fit in the ambient space.
        if self.n_id_clusters + self.n_ood_clusters + 4 > self.dim {
            return fail(format!(
                "{} ID + {} OOD cluster centers do not fit in dim {}",
                self.n_id_clusters, self.n_ood_clusters, self.dim
            ));
        }
        Ok(())
    }
}

/// The latent frame a corpus was generated from. Not serialised with the
/// store; used by diagnostics and geometry tests.
#[derive(Debug, Clone)]
pub struct SynthGeometry {
    /// Orthonormal ID cluster centers, one row each.
    pub id_centers: Array2<f64>,
    /// OOD cluster centers, one row each.
    pub ood_centers: Array2<f64>,
    /// Per-ID-cluster confusion directions (unit, orthogonal to their
    /// center), one row each.
    pub confusion_dirs: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Normalise in place; `None` if the norm is degenerate.
fn normalized(mut v: Array1<f64>) -> Option<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm <= 1e-9 {
        return None;
    }
    v /= norm;
    Some(v)
}

/// Remove the components of `v` along each (unit) row of `basis`.
fn orthogonalize(v: &mut Array1<f64>, basis: &[ArrayView1<f64>]) {
    for b in basis {
        let c = v.dot(b);
        v.scaled_add(-c, b);
    }
}

/// Draw a unit vector orthogonal to every (unit, mutually orthogonal) row
/// in `basis`.
fn random_tangent(
    rng: &mut ChaCha8Rng,
    dim: usize,
    basis: &[ArrayView1<f64>],
) -> Result<Array1<f64>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut v = gaussian(rng, dim);
        orthogonalize(&mut v, basis);
        if let Some(u) = normalized(v) {
            return Ok(u);
        }
    }
    Err(Error::InfeasibleGeometry(
        "could not draw a tangent direction (dimension exhausted?)".into(),
    ))
}

/// `cos θ · center + sin θ · tangent` — a point at geodesic angle θ from
/// `center` in the `tangent` direction.
fn rotate(center: ArrayView1<f64>, tangent: ArrayView1<f64>, theta: f64) -> Array1<f64> {
    let mut out = center.to_owned() * theta.cos();
    out.scaled_add(theta.sin(), &tangent);
    out
}

struct Builder {
    dim: usize,
    records: Vec<RowRecord>,
}

impl Builder {
    fn push(&mut self, id: String, role: Role, v: &Array1<f64>) {
        self.records.push(RowRecord {
            id,
            role,
            split: Split::Unassigned,
            vector: v.iter().map(|&x| x as f32).collect(),
        });
    }
}

/// Generate a corpus and also return the latent geometry frame.
pub fn synth_corpus_detailed(spec: &SynthSpec) -> Result<(EmbeddingStore, SynthGeometry)> {
    spec.validate()?;
    let dim = spec.dim;
    let h = spec.hard_perturbation_angle;

    // --- phase 0: orthonormal ID centers ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 0]);
    let mut id_centers = Array2::<f64>::zeros((spec.n_id_clusters, dim));
    for i in 0..spec.n_id_clusters {
        let prior: Vec<ArrayView1<f64>> = (0..i).map(|j| id_centers.row(j)).collect();
        let c = random_tangent(&mut rng, dim, &prior)?;
        id_centers.row_mut(i).assign(&c);
    }

    // --- phase 1: confusion directions, one per ID cluster ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 1]);
    let mut confusion_dirs = Array2::<f64>::zeros((spec.n_id_clusters, dim));
    for i in 0..spec.n_id_clusters {
        let u = random_tangent(&mut rng, dim, &[id_centers.row(i)])?;
        confusion_dirs.row_mut(i).assign(&u);
    }

    // --- phase 2: OOD centers ---
    // Proposals live in the orthogonal complement of the ID centers (so
    // they are exactly pi/2 from each); rejection enforces the separation
    // requirement (which may exceed pi/2) and pairwise spread.
    let mut rng = stream(spec.seed, &[salt::SYNTH, 2]);
    let id_center_views: Vec<ArrayView1<f64>> =
        (0..spec.n_id_clusters).map(|j| id_centers.row(j)).collect();
    let sep_cos = (spec.easy_ood_separation_angle + OOD_CENTER_MARGIN).cos();
    let spread_cos = OOD_CENTER_SPREAD.cos();
    let mut ood_centers = Array2::<f64>::zeros((spec.n_ood_clusters, dim));
    for i in 0..spec.n_ood_clusters {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let c = random_tangent(&mut rng, dim, &id_center_views)?;
            let ok_id = (0..spec.n_id_clusters).all(|j| c.dot(&id_centers.row(j)) <= sep_cos);
            let ok_ood = (0..i).all(|j| c.dot(&ood_centers.row(j)) <= spread_cos);
            if ok_id && ok_ood {
                ood_centers.row_mut(i).assign(&c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleGeometry(format!(
                "could not place OOD center {i} at separation {} rad",
                spec.easy_ood_separation_angle
            )));
        }
    }

    let mut builder = Builder {
        dim,
        records: Vec::with_capacity(spec.n_anchors * 3 + spec.n_easy_ood + spec.n_mid_pool + spec.n_reserve),
    };

    // --- phase 3: anchors, positives, hard negatives ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 3]);
    for i in 0..spec.n_anchors {
        let cluster = i % spec.n_id_clusters;
        let c = id_centers.row(cluster);
        let u_c = confusion_dirs.row(cluster);

        // Anchor on the shell.
        let r = rng.random_range(RADIUS_LO_FACTOR * h..RADIUS_HI_FACTOR * h);
        let t = random_tangent(&mut rng, dim, &[c])?;
        let anchor = rotate(c, t.view(), r);

        // Positive: small rotation of the anchor.
        let delta = rng.random_range(POSITIVE_LO_FACTOR * h..POSITIVE_HI_FACTOR * h);
        let tp = random_tangent(&mut rng, dim, &[anchor.view()])?;
        let positive = rotate(anchor.view(), tp.view(), delta);

        // Hard negative: rotate the anchor by exactly h along a direction
        // chosen so the negative's angle to the cluster center equals the
        // anchor's own radius r. Frame:
        //   c_perp = (c − cos r · a) / sin r        (unit, ⊥a, toward center)
        //   w = β·c_perp + sqrt(1−β²)·v̂,  β = tan(h/2)/tan(r)
        //   hn = cos h · a + sin h · w
        // gives ⟨hn, c⟩ = cos r·(cos h + sin h·tan(h/2)) = cos r exactly
        // (half-angle identity), so radius carries no hardness signal.
        // v̂ mixes the cluster's confusion direction (strength α) with a
        // fresh tangent — the confusion coordinate sin h·sqrt(1−β²)·α is
        // the only systematic mark distinguishing hard negatives from ID.
        let mut c_perp = c.to_owned();
        c_perp.scaled_add(-r.cos(), &anchor);
        c_perp /= r.sin();
        let mut u_hat = u_c.to_owned();
        orthogonalize(&mut u_hat, &[anchor.view(), c_perp.view()]);
        let u_hat = normalized(u_hat).ok_or_else(|| {
            Error::InfeasibleGeometry("confusion direction collapsed in anchor frame".into())
        })?;
        let t2 = random_tangent(
            &mut rng,
            dim,
            &[anchor.view(), c_perp.view(), u_hat.view()],
        )?;
        let beta = (0.5 * h).tan() / r.tan();
        let alpha: f64 = rng.random_range(0.0..1.0);
        let mut v_hat = u_hat * alpha;
        v_hat.scaled_add((1.0 - alpha * alpha).sqrt(), &t2);
        let mut w = c_perp * beta;
        w.scaled_add((1.0 - beta * beta).sqrt(), &v_hat);
        let hn = rotate(anchor.view(), w.view(), h);

        builder.push(format!("anc-{i:06}"), Role::Anchor, &anchor);
        builder.push(format!("pos:anc-{i:06}"), Role::PositivePool, &positive);
        builder.push(format!("hn:anc-{i:06}"), Role::HardNegative, &hn);
    }

    // --- phase 4: mid pool ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 4]);
    for i in 0..spec.n_mid_pool {
        let c = id_centers.row(i % spec.n_id_clusters);
        let cos_theta = rng.random_range(spec.mid_band.0..spec.mid_band.1);
        let t = random_tangent(&mut rng, dim, &[c])?;
        let v = rotate(c, t.view(), cos_theta.acos());
        builder.push(format!("mid-{i:06}"), Role::MidPool, &v);
    }

    // --- phase 5: easy OOD ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 5]);
    let item_sep_cos = spec.easy_ood_separation_angle.cos();
    for i in 0..spec.n_easy_ood {
        let c = ood_centers.row(i % spec.n_ood_clusters);
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let r = rng.random_range(RADIUS_LO_FACTOR * h..RADIUS_HI_FACTOR * h);
            let t = random_tangent(&mut rng, dim, &[c])?;
            let v = rotate(c, t.view(), r);
            // Item-level guarantee, not just a center-level one.
            if (0..spec.n_id_clusters).all(|j| v.dot(&id_centers.row(j)) <= item_sep_cos) {
                builder.push(format!("ood-{i:06}"), Role::EasyOod, &v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleGeometry(format!(
                "could not place easy-OOD item {i} outside the ID separation cone"
            )));
        }
    }

    // --- phase 6: reserve (uniform in-domain filler, anchor law) ---
    let mut rng = stream(spec.seed, &[salt::SYNTH, 6]);
    for i in 0..spec.n_reserve {
        let c = id_centers.row(i % spec.n_id_clusters);
        let r = rng.random_range(RADIUS_LO_FACTOR * h..RADIUS_HI_FACTOR * h);
        let t = random_tangent(&mut rng, dim, &[c])?;
        let v = rotate(c, t.view(), r);
        builder.push(format!("res-{i:06}"), Role::Reserve, &v);
    }

    let store = EmbeddingStore::from_records(builder.dim, builder.records)?;
    Ok((
        store,
        SynthGeometry {
            id_centers,
            ood_centers,
            confusion_dirs,
        },
    ))
}

/// Generate a corpus. See module docs for the geometry.
pub fn synth_corpus(spec: &SynthSpec) -> Result<EmbeddingStore> {
    synth_corpus_detailed(spec).map(|(store, _)| store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::emb1;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            dim: 64,
            n_id_clusters: 3,
            n_ood_clusters: 2,
            n_anchors: 90,
            n_easy_ood: 80,
            n_mid_pool: 100,
            n_reserve: 60,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_seed_and_sensitive_to_it() {
        let spec = small_spec();
        let a = emb1::to_bytes(&synth_corpus(&spec).unwrap());
        let b = emb1::to_bytes(&synth_corpus(&spec).unwrap());
        assert_eq!(a, b, "same spec+seed must be byte-identical");
        let c = emb1::to_bytes(
            &synth_corpus(&SynthSpec {
                seed: 12,
                ..spec
            })
            .unwrap(),
        );
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn role_counts_match_spec() {
        let spec = small_spec();
        let s = synth_corpus(&spec).unwrap();
        let count = |role: Role| s.select(|r, _| r == role).len();
        assert_eq!(count(Role::Anchor), spec.n_anchors);
        assert_eq!(count(Role::PositivePool), spec.n_anchors);
        assert_eq!(count(Role::HardNegative), spec.n_anchors);
        assert_eq!(count(Role::EasyOod), spec.n_easy_ood);
        assert_eq!(count(Role::MidPool), spec.n_mid_pool);
        assert_eq!(count(Role::Reserve), spec.n_reserve);
    }

    #[test]
    fn every_vector_is_unit_norm() {
        let s = synth_corpus(&small_spec()).unwrap();
        for row in 0..s.len() as u32 {
            let norm = s
                .raw_row(row)
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {row} norm {norm}");
        }
    }

    #[test]
    fn hard_negatives_sit_at_the_exact_angle() {
        let spec = small_spec();
        let s = synth_corpus(&spec).unwrap();
        let want = spec.hard_perturbation_angle.cos();
        let mut sum = 0.0;
        let anchors = s.select(|r, _| r == Role::Anchor);
        for &a in &anchors {
            let hn = s.hard_negative_of(a).unwrap();
            let cos = s.unit_row(a).dot(&s.unit_row(hn));
            assert!((cos - want).abs() < 1e-5, "per-item angle must be exact");
            sum += cos;
        }
        let mean = sum / anchors.len() as f64;
        assert!((mean - want).abs() < 0.02);
    }

    #[test]
    fn hard_negatives_preserve_the_radius_marginal() {
        // The defining property of the construction: a hard negative's
        // angle to its cluster center equals its anchor's.
        let spec = small_spec();
        let (s, geo) = synth_corpus_detailed(&spec).unwrap();
        for &a in &s.select(|r, _| r == Role::Anchor) {
            let hn = s.hard_negative_of(a).unwrap();
            let best = |row: u32| {
                (0..geo.id_centers.nrows())
                    .map(|j| s.unit_row(row).dot(&geo.id_centers.row(j)))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            assert!(
                (best(a) - best(hn)).abs() < 1e-5,
                "radius must carry no hardness signal"
            );
        }
    }

    #[test]
    fn positives_stay_inside_half_the_hard_angle() {
        let spec = small_spec();
        let s = synth_corpus(&spec).unwrap();
        let min_cos = (0.5 * spec.hard_perturbation_angle).cos();
        for &a in &s.select(|r, _| r == Role::Anchor) {
            let p = s.positive_of(a).unwrap();
            let cos = s.unit_row(a).dot(&s.unit_row(p));
            assert!(cos > min_cos, "positive farther than h/2 from its anchor");
        }
    }

    #[test]
    fn easy_ood_respects_the_separation_cone() {
        let spec = small_spec();
        let (s, geo) = synth_corpus_detailed(&spec).unwrap();
        let cap = spec.easy_ood_separation_angle.cos() + 0.02;
        let mut min_of_max = f64::INFINITY;
        for &row in &s.select(|r, _| r == Role::EasyOod) {
            let max_cos = (0..geo.id_centers.nrows())
                .map(|j| s.unit_row(row).dot(&geo.id_centers.row(j)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max_cos <= cap, "item leaked inside the separation cone");
            min_of_max = min_of_max.min(max_cos);
        }
        assert!(min_of_max <= cap);
    }

    #[test]
    fn mid_pool_lies_in_its_band() {
        let spec = small_spec();
        let (s, geo) = synth_corpus_detailed(&spec).unwrap();
        for &row in &s.select(|r, _| r == Role::MidPool) {
            let max_cos = (0..geo.id_centers.nrows())
                .map(|j| s.unit_row(row).dot(&geo.id_centers.row(j)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                max_cos >= spec.mid_band.0 - 1e-6 && max_cos <= spec.mid_band.1 + 1e-6,
                "mid item cosine {max_cos} outside band"
            );
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let tiny_dim = SynthSpec {
            dim: 4,
            ..small_spec()
        };
        assert!(matches!(
            synth_corpus(&tiny_dim),
            Err(Error::InfeasibleGeometry(_))
        ));
        let inverted = SynthSpec {
            hard_perturbation_angle: 1.3,
            easy_ood_separation_angle: 0.3,
            ..small_spec()
        };
        assert!(matches!(
            synth_corpus(&inverted),
            Err(Error::InfeasibleGeometry(_))
        ));
        let bad_band = SynthSpec {
            mid_band: (0.9, 0.2),
            ..small_spec()
        };
        assert!(matches!(
            synth_corpus(&bad_band),
            Err(Error::InfeasibleGeometry(_))
        ));
    }
}
