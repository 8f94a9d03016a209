//! Central finite-difference gradient checking.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Step of the central difference `(f(p+h) - f(p-h)) / 2h`.
    pub h: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
    /// Relative errors are measured against
    /// `max(|analytic|, |numeric|, scale_floor * max|numeric over all parameters|, abs_floor)`.
    /// The floor keeps exactly-zero gradients, such as a key bias under
    /// softmax, from turning round-off into large relative errors.
    pub scale_floor: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            scale_floor: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.entries.is_empty() && self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares analytic gradients of every trainable parameter in `store` with
/// central differences of the scalar built by `f`. Mismatches are reported,
/// not raised; errors only come from `f` itself.
pub fn grad_check<E, F>(store: &mut ParamStore, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out)?
    };

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let ids: Vec<ParamId> = store.trainable().collect();
    let mut checked = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.value(id).numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + cfg.h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - cfg.h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            numeric.push((plus - minus) / (2.0 * cfg.h));
        }
        checked.push((id, coords, numeric));
    }
    let scale = checked
        .iter()
        .flat_map(|(_, _, n)| n)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.scale_floor * scale).max(cfg.abs_floor);
    let mut report = GradCheckReport::default();
    for (id, coords, numeric) in checked {
        let grad = analytic.param(id);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (&c, &n) in coords.iter().zip(&numeric) {
            let a = grad.map_or(0.0, |g| g.data()[c]);
            let err = (a - n).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(n.abs()).max(floor));
        }
        report.entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    Ok(report)
}
