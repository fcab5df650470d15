//! Central finite-difference verification of analytic gradients, run in
//! double precision.

use crate::params::{Gradients, ParamStore, SlotId};

/// Distance below which an activation input counts as sitting on a kink.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Denominator floor of the relative-error measure. With a step of 1e-3 the
/// difference quotient carries round-off noise around 1e-10 in absolute
/// terms; the floor keeps that noise from registering as error on entries
/// whose true gradient is (near) zero, while leaving real mismatches on any
/// meaningful gradient clearly visible.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Nondifferentiability report for one function evaluation: a hash of the
/// active-set decisions (relu signs, pooling argmaxes) and the smallest
/// distance from any activation input to its kink.
#[derive(Clone, Copy, Debug)]
pub struct KinkInfo {
    pub signature: u64,
    pub margin: f64,
}

impl KinkInfo {
    /// For functions with no kinks at all.
    pub fn smooth() -> Self {
        KinkInfo {
            signature: 0,
            margin: f64::INFINITY,
        }
    }
}

/// Incrementally builds a [`KinkInfo`] while a forward pass runs.
pub struct KinkTracker {
    hash: u64,
    margin: f64,
}

impl Default for KinkTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl KinkTracker {
    pub fn new() -> Self {
        KinkTracker {
            hash: 0xcbf29ce484222325,
            margin: f64::INFINITY,
        }
    }

    fn eat(&mut self, byte: u8) {
        self.hash ^= byte as u64;
        self.hash = self.hash.wrapping_mul(0x100000001b3);
    }

    /// Records relu pre-activations: their sign pattern enters the
    /// signature and their magnitude the margin.
    pub fn note_relu(&mut self, pre: &[impl crate::tensor::Scalar]) {
        for v in pre {
            let v = v.as_f64();
            self.eat((v > 0.0) as u8);
            self.margin = self.margin.min(v.abs());
        }
    }

    /// Like [`Self::note_relu`] but ignores inputs that are exactly zero
    /// when measuring the margin. Used where zeros are structural (messages
    /// of empty-support aggregation rows), so the function is locally
    /// constant there rather than kinked.
    pub fn note_relu_skip_exact_zero(&mut self, pre: &[impl crate::tensor::Scalar]) {
        for v in pre {
            let v = v.as_f64();
            self.eat((v > 0.0) as u8);
            if v != 0.0 {
                self.margin = self.margin.min(v.abs());
            }
        }
    }

    /// Records a pooling selection: argmax choices enter the signature, the
    /// winner/runner-up gap the margin.
    pub fn note_pool(&mut self, argmax: &[u32], margin: f64) {
        for &a in argmax {
            for b in a.to_le_bytes() {
                self.eat(b);
            }
        }
        self.margin = self.margin.min(margin);
    }

    pub fn finish(self) -> KinkInfo {
        KinkInfo {
            signature: self.hash,
            margin: self.margin,
        }
    }
}

/// Verification result for one parameter slot.
#[derive(Clone, Debug)]
pub struct SlotCheck {
    pub name: String,
    /// Largest relative error across compared entries.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries skipped because an evaluation sat on (or the step crossed) an
    /// activation kink, where finite differences are meaningless.
    pub skipped: usize,
}

/// Verification result across all slots of a store.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub slots: Vec<SlotCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.slots.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }

    pub fn total_checked(&self) -> usize {
        self.slots.iter().map(|s| s.checked).sum()
    }

    pub fn total_skipped(&self) -> usize {
        self.slots.iter().map(|s| s.skipped).sum()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences `(f(θ+eps) - f(θ-eps)) /
/// (2·eps)` for every entry of every slot.
///
/// `f` receives the store and, for perturbed evaluations, the coordinate
/// that changed — implementations may use it to reuse cached intermediate
/// state, as long as the returned value equals a full evaluation. It returns
/// the scalar objective together with a [`KinkInfo`] describing the
/// activation decisions taken during the evaluation.
///
/// An entry is excluded from comparison when any of its three evaluations
/// reports a kink margin below [`KINK_TOLERANCE`], or when the two perturbed
/// evaluations disagree on an activation decision (the step straddles a
/// kink).
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    analytic: &Gradients<f64>,
    eps: f64,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>, Option<(SlotId, usize)>) -> (f64, KinkInfo),
{
    let (_, nominal_kink) = f(params, None);
    let ids: Vec<SlotId> = params.ids().collect();
    let mut slots = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.name(id).to_string();
        let n = params.get(id).len();
        let mut max_rel_err = 0.0f64;
        let mut checked = 0usize;
        let mut skipped = 0usize;
        for idx in 0..n {
            let original = params.get(id).data()[idx];
            params.get_mut(id).data_mut()[idx] = original + eps;
            let (f_plus, kink_plus) = f(params, Some((id, idx)));
            params.get_mut(id).data_mut()[idx] = original - eps;
            let (f_minus, kink_minus) = f(params, Some((id, idx)));
            params.get_mut(id).data_mut()[idx] = original;

            let near_kink = nominal_kink.margin < KINK_TOLERANCE
                || kink_plus.margin < KINK_TOLERANCE
                || kink_minus.margin < KINK_TOLERANCE;
            if near_kink || kink_plus.signature != kink_minus.signature {
                skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let err = relative_error(analytic.get(id).data()[idx], numeric);
            max_rel_err = max_rel_err.max(err);
            checked += 1;
        }
        slots.push(SlotCheck {
            name,
            max_rel_err,
            checked,
            skipped,
        });
    }
    GradCheckReport { slots }
}
