//! Closed-form error bound quantities and their empirical check.

use serde::{Deserialize, Serialize};

use crate::hashing::LayerHasher;
use crate::metrics::GroundTruth;
use crate::sketch::Sketch;

/// Shape of a split sketch for the bound calculator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub layers: usize,
    pub expansion: u64,
    pub top_width: usize,
}

impl BoundInputs {
    /// `w_j = r^(d-j)·w_d`, lowest layer first.
    pub fn widths(&self) -> Vec<f64> {
        let d = self.layers as i32;
        (1..=d)
            .map(|j| (self.expansion as f64).powi(d - j) * self.top_width as f64)
            .collect()
    }

    /// `ε_j = e / w_j`, lowest layer first.
    pub fn epsilons(&self) -> Vec<f64> {
        self.widths().iter().map(|w| std::f64::consts::E / w).collect()
    }

    pub fn epsilon_top(&self) -> f64 {
        std::f64::consts::E / self.top_width as f64
    }

    /// `δ = e^(-d)`.
    pub fn delta(&self) -> f64 {
        (-(self.layers as f64)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundOutputs {
    pub layers: usize,
    pub expansion: u64,
    pub top_width: usize,
    pub epsilons: Vec<f64>,
    pub epsilon_top: f64,
    pub delta: f64,
    /// `Π_j r^(-d(d-j))`.
    pub alpha: f64,
    /// `δ·α`.
    pub delta_star: f64,
    /// `r(r^d - 1) / (r^d (r - 1))`.
    pub geometric: f64,
    /// `Σ_{k=1..d} (d-k+1)/k / d²`.
    pub harmonic: f64,
    /// `geometric · harmonic`.
    pub average_coefficient: f64,
    /// `1 - e^(-(d-j+1))` for flows decoded from layers `j..d`, lowest first.
    pub case_probabilities: Vec<f64>,
}

pub fn compute_bounds(inputs: &BoundInputs) -> BoundOutputs {
    let d = inputs.layers;
    let r = inputs.expansion as f64;
    let df = d as f64;
    let delta = inputs.delta();
    let exponent = -df * (df * (df - 1.0) / 2.0);
    let alpha = r.powf(exponent);
    let rd = r.powi(d as i32);
    let geometric = r * (rd - 1.0) / (rd * (r - 1.0));
    let harmonic = (1..=d).map(|k| (d - k + 1) as f64 / k as f64).sum::<f64>() / (df * df);
    BoundOutputs {
        layers: d,
        expansion: inputs.expansion,
        top_width: inputs.top_width,
        epsilons: inputs.epsilons(),
        epsilon_top: inputs.epsilon_top(),
        delta,
        alpha,
        delta_star: delta * alpha,
        geometric,
        harmonic,
        average_coefficient: geometric * harmonic,
        case_probabilities: (1..=d).map(|j| 1.0 - (-((d - j + 1) as f64)).exp()).collect(),
    }
}

/// Flows whose true size lies in `[floor, ceiling)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub layer: usize,
    pub floor: u64,
    pub ceiling: Option<u64>,
    pub flows: u64,
    /// `ε_j · ||a^j||`.
    pub bound: f64,
    pub exceeding: u64,
    pub exceedance: f64,
    pub allowed_failure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub flows: u64,
    /// `ε_d · ||a^1||`.
    pub bound: f64,
    pub exceeding: u64,
    pub exceedance: f64,
    pub delta: f64,
    pub delta_star: f64,
    pub max_error: u64,
    pub groups: Vec<GroupCheck>,
}

/// Fraction of flows whose overestimate reaches `ε_d·||a^1||`, plus the
/// same check per size group against that group's layer bound.
pub fn verify_bound<H: LayerHasher>(truth: &GroundTruth, sketch: &Sketch<H>) -> BoundReport {
    let layout = sketch.layout();
    let d = layout.layers();
    let limits = sketch.limits();
    let expansion = if sketch.scheme().is_flat() {
        1
    } else {
        sketch.config().expansion
    };
    let inputs = BoundInputs {
        layers: d,
        expansion,
        top_width: layout.widths[d - 1],
    };
    let eps: Vec<f64> = layout
        .widths
        .iter()
        .map(|&w| std::f64::consts::E / w as f64)
        .collect();
    let alpha = if expansion >= 2 { compute_bounds(&inputs).alpha } else { 1.0 };
    let sums = truth.truncated_sums(limits);
    let bound = inputs.epsilon_top() * sums[0] as f64;

    let floors: Vec<u64> = (0..d).map(|j| if j == 0 { 0 } else { limits[j - 1] }).collect();
    let mut groups: Vec<GroupCheck> = (0..d)
        .map(|j| GroupCheck {
            layer: j,
            floor: floors[j],
            ceiling: (j + 1 < d).then(|| limits[j]),
            flows: 0,
            bound: eps[j] * sums[j] as f64,
            exceeding: 0,
            exceedance: 0.0,
            allowed_failure: (-((d - j) as f64)).exp(),
        })
        .collect();

    let (mut flows, mut exceeding, mut max_error) = (0u64, 0u64, 0u64);
    for (key, a) in truth.flows() {
        let err = sketch.query(key).saturating_sub(a);
        flows += 1;
        max_error = max_error.max(err);
        if err as f64 >= bound {
            exceeding += 1;
        }
        let g = floors.iter().rposition(|&f| a >= f).unwrap_or(0);
        let group = &mut groups[g];
        group.flows += 1;
        if err as f64 >= group.bound {
            group.exceeding += 1;
        }
    }
    for g in &mut groups {
        g.exceedance = if g.flows == 0 { 0.0 } else { g.exceeding as f64 / g.flows as f64 };
    }
    let delta = inputs.delta();
    BoundReport {
        flows,
        bound,
        exceeding,
        exceedance: if flows == 0 { 0.0 } else { exceeding as f64 / flows as f64 },
        delta,
        delta_star: delta * alpha,
        max_error,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::{FlowKey, IdentityHasher};
    use crate::sketch::{Scheme, SketchConfig};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-300)
    }

    #[test]
    fn four_by_three_constants() {
        let out = compute_bounds(&BoundInputs {
            layers: 3,
            expansion: 4,
            top_width: 22469,
        });
        assert!(close(out.alpha, 3.814697265625e-6));
        assert!(close(out.geometric, 1.3125));
        assert!(close(out.harmonic, 13.0 / 27.0));
        assert!(close(out.average_coefficient, 1.3125 * 13.0 / 27.0));
        assert!(close(out.delta, (-3f64).exp()));
        assert!(close(out.delta_star, (-3f64).exp() * 3.814697265625e-6));
        assert!(close(out.epsilons[2], std::f64::consts::E / 22469.0));
        assert!(close(out.epsilons[0], out.epsilon_top / 16.0));
        assert!(close(out.case_probabilities[0], 1.0 - (-3f64).exp()));
        assert!(close(out.case_probabilities[2], 1.0 - (-1f64).exp()));
    }

    #[test]
    fn harmonic_factor_for_four_layers() {
        let out = compute_bounds(&BoundInputs {
            layers: 4,
            expansion: 4,
            top_width: 10,
        });
        assert!(close(out.harmonic, 0.4010416666666667));
    }

    #[test]
    fn single_layer_has_no_penalty() {
        let out = compute_bounds(&BoundInputs {
            layers: 1,
            expansion: 2,
            top_width: 10,
        });
        assert_eq!(out.alpha, 1.0);
        assert_eq!(out.delta_star, out.delta);
    }

    #[test]
    fn empty_trace_has_no_exceedance() {
        let cfg = SketchConfig::new(Scheme::SplitMU, 1 << 12, 3, 4, 0);
        let s = Sketch::new(cfg).unwrap();
        let r = verify_bound(&GroundTruth::default(), &s);
        assert_eq!(r.exceedance, 0.0);
        assert_eq!(r.flows, 0);
    }

    #[test]
    fn groups_follow_layer_limits() {
        // Tiny config: limits 3, 15, 255.
        let cfg = SketchConfig::new(Scheme::SplitMU, 3, 3, 2, 0).with_top_bits(8);
        let mut s = Sketch::with_hasher(cfg, IdentityHasher).unwrap();
        let mut gt = GroundTruth::default();
        for (key, n) in [(0u64, 2u64), (1, 5), (2, 20)] {
            for _ in 0..n {
                let f = FlowKey::from_u64(key);
                let _ = s.encode(&f);
                gt.add(&f);
            }
        }
        let r = verify_bound(&gt, &s);
        let flows: Vec<u64> = r.groups.iter().map(|g| g.flows).collect();
        assert_eq!(flows, vec![1, 1, 1]);
        assert_eq!(r.groups[1].floor, 3);
        assert_eq!(r.groups[2].floor, 15);
        assert_eq!(r.groups[2].ceiling, None);
    }
}
