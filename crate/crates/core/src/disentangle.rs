//! Central Moment Discrepancy and the cross-modal consistency loss on the
//! invariant subspace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmdConfig {
    /// Highest central-moment order `K`.
    pub order: u32,
    pub lower: f64,
    pub upper: f64,
    /// Squash inputs with `tanh` so they really live in `(-1, 1)`.
    pub squash: bool,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self {
            order: 5,
            lower: -1.0,
            upper: 1.0,
            squash: true,
        }
    }
}

impl CmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::config("CMD order must be >= 1"));
        }
        if !(self.upper > self.lower) {
            return Err(Error::config("CMD bounds need upper > lower"));
        }
        Ok(())
    }
}

/// `CMD(X, Y)` for sample matrices `X: [n₁, d]`, `Y: [n₂, d]` (rows are
/// samples). Moments are taken per coordinate.
pub fn cmd(tape: &mut Tape, x: Var, y: Var, cfg: &CmdConfig) -> Result<Var> {
    cfg.validate()?;
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::shape("cmd", sx, sy));
    }
    let (x, y) = if cfg.squash {
        (tape.tanh(x), tape.tanh(y))
    } else {
        (x, y)
    };
    let span = (cfg.upper - cfg.lower).abs();

    let mx = tape.mean_axis(x, 0)?;
    let my = tape.mean_axis(y, 0)?;
    let diff = tape.sub(mx, my)?;
    let first = tape.l2_norm(diff);
    let mut total = tape.scale(first, 1.0 / span);
    if cfg.order < 2 {
        return Ok(total);
    }

    let neg_mx = tape.neg(mx);
    let neg_my = tape.neg(my);
    let cx = tape.add_broadcast(x, neg_mx)?;
    let cy = tape.add_broadcast(y, neg_my)?;
    for k in 2..=cfg.order as i32 {
        let px = tape.powi(cx, k);
        let py = tape.powi(cy, k);
        let ck_x = tape.mean_axis(px, 0)?;
        let ck_y = tape.mean_axis(py, 0)?;
        let d = tape.sub(ck_x, ck_y)?;
        let n = tape.l2_norm(d);
        let term = tape.scale(n, 1.0 / span.powi(k));
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Mean CMD over the three unordered modality pairs.
pub fn consistency_loss(tape: &mut Tape, a: Var, v: Var, t: Var, cfg: &CmdConfig) -> Result<Var> {
    let av = cmd(tape, a, v, cfg)?;
    let at = cmd(tape, a, t, cfg)?;
    let vt = cmd(tape, v, t, cfg)?;
    let s = tape.add(av, at)?;
    let s = tape.add(s, vt)?;
    Ok(tape.scale(s, 1.0 / 3.0))
}

/// [`cmd`] on plain tensors.
pub fn cmd_value(x: &Tensor, y: &Tensor, cfg: &CmdConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = cmd(&mut tape, xv, yv, cfg)?;
    Ok(tape.value(out).item())
}

/// [`consistency_loss`] on plain tensors.
pub fn consistency_value(a: &Tensor, v: &Tensor, t: &Tensor, cfg: &CmdConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [a, v, t].map(|x| tape.constant(x.clone()));
    let out = consistency_loss(&mut tape, vars[0], vars[1], vars[2], cfg)?;
    Ok(tape.value(out).item())
}
