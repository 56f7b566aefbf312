//! Two-branch box prediction head over `[query ∥ retrieved]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::conv;
use crate::error::{ensure, Result};
use crate::numerics::{init_conv, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub width: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { width: 64 }
    }
}

/// Initial score bias: sigmoid(-2) ≈ 0.12.
const SCORE_PRIOR_BIAS: f64 = -2.0;

pub fn init_params(params: &mut ParamSet, cfg: &HeadConfig, in_channels: usize, num_anchors: usize, rng: &mut impl Rng) {
    for (branch, out) in [("score", num_anchors), ("reg", 4 * num_anchors)] {
        init_conv(params, &format!("head.{branch}.c1"), in_channels, cfg.width, 3, rng);
        init_conv(params, &format!("head.{branch}.c2"), cfg.width, cfg.width, 3, rng);
        init_conv(params, &format!("head.{branch}.proj"), cfg.width, out, 1, rng);
    }
    // Small regression outputs at start keep decoded boxes near their anchors.
    let w = params.get("head.reg.proj.w").expect("just inserted").map(|v| v * 0.1);
    params.insert("head.reg.proj.w", w);
    params.insert("head.score.proj.b", Tensor::full(&[num_anchors], SCORE_PRIOR_BIAS));
}

/// Center score map `[A, H, W]` in (0, 1) and regression map `[4A, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub score: Var,
    pub reg: Var,
}

fn branch(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let h = conv(tape, params, &format!("head.{name}.c1"), x, 1)?;
    let h = tape.relu(h)?;
    let h = conv(tape, params, &format!("head.{name}.c2"), h, 1)?;
    let h = tape.relu(h)?;
    conv(tape, params, &format!("head.{name}.proj"), h, 1)
}

pub fn predict(tape: &mut Tape, params: &ParamSet, query: Var, retrieved: Var) -> Result<PredictionVars> {
    let (qs, rs) = (tape.shape(query).to_vec(), tape.shape(retrieved).to_vec());
    ensure!(qs.len() == 3 && rs.len() == 3, "head inputs must be [C, H, W]");
    ensure!(qs[1..] == rs[1..], "query {:?} and retrieved {:?} differ spatially", qs, rs);
    let x = tape.concat(&[query, retrieved], 0)?;
    let logits = branch(tape, params, "score", x)?;
    let score = tape.sigmoid(logits)?;
    let reg = branch(tape, params, "reg", x)?;
    Ok(PredictionVars { score, reg })
}
