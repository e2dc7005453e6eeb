use super::params::{ParamId, ParamStore};
use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name (or `"x"`) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            coordinates: 0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coordinates += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.coordinates += other.coordinates;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.clone();
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval_scalar(make_tape: &impl Fn() -> Tape, f: &impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<f64> {
    let mut tape = make_tape();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    tape.value(out).item()
}

/// Checks the gradient of scalar function `f` at `x` by central differences.
pub fn grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<GradCheckReport> {
    grad_check_on(Tape::new, f, x, eps)
}

/// [`grad_check`] with every evaluation on a tape from `make_tape`, e.g. a
/// training tape with a fixed dropout seed.
pub fn grad_check_on(
    make_tape: impl Fn() -> Tape,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut tape = make_tape();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut report = GradCheckReport::new();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&make_tape, &f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&make_tape, &f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record("x", i, analytic.data()[i], (plus - minus) / (2.0 * eps));
    }
    Ok(report)
}

/// Checks gradients of a scalar loss with respect to every coordinate of
/// every parameter selected by `select`. The store is restored on return.
pub fn grad_check_params(
    store: &mut ParamStore,
    loss_fn: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    eps: f64,
    select: impl Fn(ParamId, &str) -> bool,
) -> Result<GradCheckReport> {
    let saved_grads: Vec<Option<Tensor>> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward_into(loss, store)?;
    let analytic: Vec<Tensor> = store
        .iter()
        .map(|(_, p)| p.grad.clone().expect("zeroed above"))
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss_fn(&mut tape, store)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if !select(id, &name) || !store.get(id).requires_grad {
            continue;
        }
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            report.record(&name, i, analytic[id.index()].data()[i], (plus - minus) / (2.0 * eps));
        }
    }
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, saved) in ids.into_iter().zip(saved_grads) {
        store.get_mut(id).grad = saved;
    }
    Ok(report)
}
