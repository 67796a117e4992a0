//! Bidirectional recurrent context fusion over the patch grid.
//!
//! Each class-conditioned stream is swept by four LSTM cells: a forward and
//! a backward pass along every grid row (horizontal orientation) and along
//! every grid column (vertical orientation). Within one orientation the two
//! directional hidden states are concatenated per position and projected
//! back to the stream width; the horizontal and vertical projections are
//! summed. Cell parameters are shared across class streams but separate per
//! direction and per orientation, and one projection is shared by both
//! orientations.
//!
//! All rows (and all columns) of all class streams advance in lockstep as
//! one batched recurrence, which keeps the step count at `O(grid side)`
//! while computing exactly the same per-sequence values as independent
//! passes.

use crate::class_token::ConditionedFeatures;
use crate::params::Stager;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;

/// Sweep direction along a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One LSTM cell: input/forget/output/candidate gate weights over the input
/// (`[K, d]`), the recurrent state (`[d, d]`), and biases (`[1, d]`).
/// The forget bias starts at 1 so early training does not erase state.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_input: Tensor,
    pub u_input: Tensor,
    pub b_input: Tensor,
    pub w_forget: Tensor,
    pub u_forget: Tensor,
    pub b_forget: Tensor,
    pub w_output: Tensor,
    pub u_output: Tensor,
    pub b_output: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCellParams {
    pub fn init(rng: &mut Rng, input_dim: usize, hidden_dim: usize) -> Self {
        let w = |rng: &mut Rng| Tensor::randn(rng, &[input_dim, hidden_dim], INIT_STD);
        let u = |rng: &mut Rng| Tensor::randn(rng, &[hidden_dim, hidden_dim], INIT_STD);
        LstmCellParams {
            w_input: w(rng),
            u_input: u(rng),
            b_input: Tensor::zeros(&[1, hidden_dim]),
            w_forget: w(rng),
            u_forget: u(rng),
            b_forget: Tensor::full(&[1, hidden_dim], 1.0),
            w_output: w(rng),
            u_output: u(rng),
            b_output: Tensor::zeros(&[1, hidden_dim]),
            w_cand: w(rng),
            u_cand: u(rng),
            b_cand: Tensor::zeros(&[1, hidden_dim]),
            input_dim,
            hidden_dim,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_input", &self.w_input),
            ("u_input", &self.u_input),
            ("b_input", &self.b_input),
            ("w_forget", &self.w_forget),
            ("u_forget", &self.u_forget),
            ("b_forget", &self.b_forget),
            ("w_output", &self.w_output),
            ("u_output", &self.u_output),
            ("b_output", &self.b_output),
            ("w_cand", &self.w_cand),
            ("u_cand", &self.u_cand),
            ("b_cand", &self.b_cand),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("w_input", &mut self.w_input),
            ("u_input", &mut self.u_input),
            ("b_input", &mut self.b_input),
            ("w_forget", &mut self.w_forget),
            ("u_forget", &mut self.u_forget),
            ("b_forget", &mut self.b_forget),
            ("w_output", &mut self.w_output),
            ("u_output", &mut self.u_output),
            ("b_output", &mut self.b_output),
            ("w_cand", &mut self.w_cand),
            ("u_cand", &mut self.u_cand),
            ("b_cand", &mut self.b_cand),
        ]
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        for (field, tensor) in self.fields() {
            f(format!("{prefix}.{field}"), tensor);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for (field, tensor) in self.fields_mut() {
            f(format!("{prefix}.{field}"), tensor);
        }
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> CellVars {
        let staged: Vec<Var> = self
            .fields()
            .iter()
            .map(|(field, tensor)| stager.param(format!("{prefix}.{field}"), tensor))
            .collect();
        CellVars {
            w_input: staged[0],
            u_input: staged[1],
            b_input: staged[2],
            w_forget: staged[3],
            u_forget: staged[4],
            b_forget: staged[5],
            w_output: staged[6],
            u_output: staged[7],
            b_output: staged[8],
            w_cand: staged[9],
            u_cand: staged[10],
            b_cand: staged[11],
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub w_input: Var,
    pub u_input: Var,
    pub b_input: Var,
    pub w_forget: Var,
    pub u_forget: Var,
    pub b_forget: Var,
    pub w_output: Var,
    pub u_output: Var,
    pub b_output: Var,
    pub w_cand: Var,
    pub u_cand: Var,
    pub b_cand: Var,
    pub hidden_dim: usize,
}

/// Projection from the concatenated `[.., 2d]` hidden pair back to the
/// stream width `e + H`.
#[derive(Debug, Clone)]
pub struct FusionParams {
    /// `[2d, e + H]`, applied on the right of row vectors.
    pub w: Tensor,
    /// `[1, e + H]`.
    pub b: Tensor,
}

impl FusionParams {
    pub fn init(rng: &mut Rng, hidden_dim: usize, width: usize) -> Self {
        FusionParams {
            w: Tensor::randn(rng, &[2 * hidden_dim, width], INIT_STD),
            b: Tensor::zeros(&[1, width]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> FusionVars {
        FusionVars {
            w: stager.param(format!("{prefix}.w"), &self.w),
            b: stager.param(format!("{prefix}.b"), &self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w: Var,
    pub b: Var,
}

/// The full module: four cells plus the shared projection.
#[derive(Debug, Clone)]
pub struct CfBilstmParams {
    pub horizontal_fwd: LstmCellParams,
    pub horizontal_bwd: LstmCellParams,
    pub vertical_fwd: LstmCellParams,
    pub vertical_bwd: LstmCellParams,
    pub fusion: FusionParams,
}

impl CfBilstmParams {
    pub fn init(rng: &mut Rng, width: usize, hidden_dim: usize) -> Self {
        CfBilstmParams {
            horizontal_fwd: LstmCellParams::init(rng, width, hidden_dim),
            horizontal_bwd: LstmCellParams::init(rng, width, hidden_dim),
            vertical_fwd: LstmCellParams::init(rng, width, hidden_dim),
            vertical_bwd: LstmCellParams::init(rng, width, hidden_dim),
            fusion: FusionParams::init(rng, hidden_dim, width),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        self.horizontal_fwd.visit(&format!("{prefix}.h_fwd"), f);
        self.horizontal_bwd.visit(&format!("{prefix}.h_bwd"), f);
        self.vertical_fwd.visit(&format!("{prefix}.v_fwd"), f);
        self.vertical_bwd.visit(&format!("{prefix}.v_bwd"), f);
        self.fusion.visit(&format!("{prefix}.proj"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.horizontal_fwd.visit_mut(&format!("{prefix}.h_fwd"), f);
        self.horizontal_bwd.visit_mut(&format!("{prefix}.h_bwd"), f);
        self.vertical_fwd.visit_mut(&format!("{prefix}.v_fwd"), f);
        self.vertical_bwd.visit_mut(&format!("{prefix}.v_bwd"), f);
        self.fusion.visit_mut(&format!("{prefix}.proj"), f);
    }

    pub fn stage(&self, stager: &mut Stager, prefix: &str) -> CfBilstmVars {
        CfBilstmVars {
            horizontal_fwd: self.horizontal_fwd.stage(stager, &format!("{prefix}.h_fwd")),
            horizontal_bwd: self.horizontal_bwd.stage(stager, &format!("{prefix}.h_bwd")),
            vertical_fwd: self.vertical_fwd.stage(stager, &format!("{prefix}.v_fwd")),
            vertical_bwd: self.vertical_bwd.stage(stager, &format!("{prefix}.v_bwd")),
            fusion: self.fusion.stage(stager, &format!("{prefix}.proj")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CfBilstmVars {
    pub horizontal_fwd: CellVars,
    pub horizontal_bwd: CellVars,
    pub vertical_fwd: CellVars,
    pub vertical_bwd: CellVars,
    pub fusion: FusionVars,
}

/// Context-fused features, same axis semantics as [`ConditionedFeatures`].
#[derive(Debug, Clone, Copy)]
pub struct FusedFeatures {
    pub features: Var,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
}

/// Gate weights packed side by side so one matmul per step covers all four
/// gates. Column order: input, forget, output, candidate.
struct PackedCell {
    wx: Var,
    uh: Var,
    bias: Var,
    hidden_dim: usize,
}

fn pack_cell(tape: &mut Tape, cell: &CellVars) -> Result<PackedCell, TensorError> {
    Ok(PackedCell {
        wx: tape.concat(&[cell.w_input, cell.w_forget, cell.w_output, cell.w_cand], 1)?,
        uh: tape.concat(&[cell.u_input, cell.u_forget, cell.u_output, cell.u_cand], 1)?,
        bias: tape.concat(&[cell.b_input, cell.b_forget, cell.b_output, cell.b_cand], 1)?,
        hidden_dim: cell.hidden_dim,
    })
}

fn cell_step(
    tape: &mut Tape,
    packed: &PackedCell,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    bias_rep: Var,
) -> Result<(Var, Var), TensorError> {
    let d = packed.hidden_dim;
    let from_x = tape.matmul(x, packed.wx)?;
    let from_h = tape.matmul(h_prev, packed.uh)?;
    let pre = tape.add(from_x, from_h)?;
    let pre = tape.add(pre, bias_rep)?;
    let gate_i = tape.slice(pre, 1, 0, d)?;
    let gate_i = tape.sigmoid(gate_i);
    let gate_f = tape.slice(pre, 1, d, 2 * d)?;
    let gate_f = tape.sigmoid(gate_f);
    let gate_o = tape.slice(pre, 1, 2 * d, 3 * d)?;
    let gate_o = tape.sigmoid(gate_o);
    let cand = tape.slice(pre, 1, 3 * d, 4 * d)?;
    let cand = tape.tanh(cand);
    let kept = tape.mul(gate_f, c_prev)?;
    let written = tape.mul(gate_i, cand)?;
    let c_next = tape.add(kept, written)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(gate_o, c_act)?;
    Ok((h_next, c_next))
}

/// One LSTM step on a batch of row vectors `[n, K]` with states `[n, d]`.
/// Initial states are zero by convention.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    cell: &CellVars,
) -> Result<(Var, Var), TensorError> {
    let n = tape.shape(x)[0];
    let packed = pack_cell(tape, cell)?;
    let bias = tape.repeat_rows(packed.bias, n)?;
    cell_step(tape, &packed, x, h_prev, c_prev, bias)
}

/// Run a packed recurrence over `steps` (each `[n, K]`), returning the
/// hidden state at every step position. `Backward` processes the last step
/// first; outputs are always indexed by step position, not processing order.
fn run_lanes(
    tape: &mut Tape,
    steps: &[Var],
    cell: &CellVars,
    direction: Direction,
) -> Result<Vec<Var>, TensorError> {
    if steps.is_empty() {
        return Err(TensorError::contract("run_direction", "empty sequence"));
    }
    let lanes = tape.shape(steps[0])[0];
    let d = cell.hidden_dim;
    let packed = pack_cell(tape, cell)?;
    let bias = tape.repeat_rows(packed.bias, lanes)?;
    let mut h = tape.zeros(&[lanes, d]);
    let mut c = tape.zeros(&[lanes, d]);
    let mut outputs: Vec<Option<Var>> = vec![None; steps.len()];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..steps.len()).collect(),
        Direction::Backward => (0..steps.len()).rev().collect(),
    };
    for t in order {
        let (h_next, c_next) = cell_step(tape, &packed, steps[t], h, c, bias)?;
        h = h_next;
        c = c_next;
        outputs[t] = Some(h);
    }
    Ok(outputs.into_iter().map(|o| o.expect("all steps visited")).collect())
}

/// Sweep one sequence `[s, K]` in the given direction; row `i` of the output
/// is the hidden state at position `i`.
pub fn run_direction(
    tape: &mut Tape,
    seq: Var,
    cell: &CellVars,
    direction: Direction,
) -> Result<Var, TensorError> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::contract(
            "run_direction",
            format!("expected [s, K] sequence, got {shape:?}"),
        ));
    }
    if shape[0] == 0 {
        return Err(TensorError::contract("run_direction", "empty sequence"));
    }
    let steps: Vec<Var> = (0..shape[0])
        .map(|t| tape.slice(seq, 0, t, t + 1))
        .collect::<Result<_, _>>()?;
    let outputs = run_lanes(tape, &steps, cell, direction)?;
    tape.concat(&outputs, 0)
}

/// Concatenate directional hidden states `[n, d] x 2 -> [n, 2d]` and apply
/// the learnable projection back to the stream width.
pub fn fuse_project(
    tape: &mut Tape,
    h_fwd: Var,
    h_bwd: Var,
    fusion: &FusionVars,
) -> Result<Var, TensorError> {
    let paired = tape.concat(&[h_fwd, h_bwd], 1)?;
    let projected = tape.matmul(paired, fusion.w)?;
    let n = tape.shape(projected)[0];
    let bias = tape.repeat_rows(fusion.b, n)?;
    tape.add(projected, bias)
}

/// Lane layout for one orientation of the grid sweep.
struct SweepPlan {
    /// Row order that groups each step's lanes contiguously, step-major.
    gather: Vec<usize>,
    /// For each canonical row, its position in the step-major layout.
    scatter_back: Vec<usize>,
    steps: usize,
    lanes: usize,
}

/// Horizontal: every grid row of every class stream is a lane; steps walk
/// the columns left to right.
fn horizontal_plan(classes: usize, rows: usize, cols: usize) -> SweepPlan {
    let s = rows * cols;
    let lanes = classes * rows;
    let mut gather = Vec::with_capacity(classes * s);
    let mut scatter_back = vec![0usize; classes * s];
    for t in 0..cols {
        for c in 0..classes {
            for r in 0..rows {
                scatter_back[c * s + r * cols + t] = gather.len();
                gather.push(c * s + r * cols + t);
            }
        }
    }
    SweepPlan {
        gather,
        scatter_back,
        steps: cols,
        lanes,
    }
}

/// Vertical: every grid column of every class stream is a lane; steps walk
/// the rows top to bottom.
fn vertical_plan(classes: usize, rows: usize, cols: usize) -> SweepPlan {
    let s = rows * cols;
    let lanes = classes * cols;
    let mut gather = Vec::with_capacity(classes * s);
    let mut scatter_back = vec![0usize; classes * s];
    for r in 0..rows {
        for c in 0..classes {
            for col in 0..cols {
                scatter_back[c * s + r * cols + col] = gather.len();
                gather.push(c * s + r * cols + col);
            }
        }
    }
    SweepPlan {
        gather,
        scatter_back,
        steps: rows,
        lanes,
    }
}

fn sweep_orientation(
    tape: &mut Tape,
    flat: Var,
    plan: &SweepPlan,
    fwd: &CellVars,
    bwd: &CellVars,
    fusion: &FusionVars,
) -> Result<Var, TensorError> {
    let reordered = tape.gather_rows(flat, &plan.gather)?;
    let steps: Vec<Var> = (0..plan.steps)
        .map(|t| tape.slice(reordered, 0, t * plan.lanes, (t + 1) * plan.lanes))
        .collect::<Result<_, _>>()?;
    let h_fwd = run_lanes(tape, &steps, fwd, Direction::Forward)?;
    let h_bwd = run_lanes(tape, &steps, bwd, Direction::Backward)?;
    let h_fwd = tape.concat(&h_fwd, 0)?;
    let h_bwd = tape.concat(&h_bwd, 0)?;
    let projected = fuse_project(tape, h_fwd, h_bwd, fusion)?;
    tape.gather_rows(projected, &plan.scatter_back)
}

/// Full contextual fusion: horizontal and vertical bidirectional sweeps over
/// every class stream (shared cell parameters across streams), projected and
/// summed, preserving the `[C, s, e + H]` layout.
pub fn contextual_fusion(
    tape: &mut Tape,
    features: &ConditionedFeatures,
    vars: &CfBilstmVars,
) -> Result<FusedFeatures, TensorError> {
    let (classes, rows, cols, width) = (
        features.classes,
        features.rows,
        features.cols,
        features.width,
    );
    let s = rows * cols;
    if s == 0 {
        return Err(TensorError::contract("contextual_fusion", "empty grid"));
    }
    let got = tape.shape(features.features).to_vec();
    if got != [classes, s, width] {
        return Err(TensorError::ShapeMismatch {
            op: "contextual_fusion",
            lhs: got,
            rhs: vec![classes, s, width],
        });
    }
    let flat = tape.reshape(features.features, &[classes * s, width])?;

    let h_plan = horizontal_plan(classes, rows, cols);
    let horizontal = sweep_orientation(
        tape,
        flat,
        &h_plan,
        &vars.horizontal_fwd,
        &vars.horizontal_bwd,
        &vars.fusion,
    )?;
    let v_plan = vertical_plan(classes, rows, cols);
    let vertical = sweep_orientation(
        tape,
        flat,
        &v_plan,
        &vars.vertical_fwd,
        &vars.vertical_bwd,
        &vars.fusion,
    )?;
    let combined = tape.add(horizontal, vertical)?;
    let features_out = tape.reshape(combined, &[classes, s, width])?;
    Ok(FusedFeatures {
        features: features_out,
        classes,
        rows,
        cols,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, GradcheckConfig};

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Test-side oracle: one LSTM step with explicit loops over the four
    /// gate matrices, no tape involved.
    fn naive_step(
        cell: &LstmCellParams,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (k, d) = (cell.input_dim, cell.hidden_dim);
        let affine = |w: &Tensor, u: &Tensor, b: &Tensor, j: usize| -> f64 {
            let mut acc = b.values()[j];
            for p in 0..k {
                acc += x[p] * w.values()[p * d + j];
            }
            for p in 0..d {
                acc += h[p] * u.values()[p * d + j];
            }
            acc
        };
        let mut h_next = vec![0.0; d];
        let mut c_next = vec![0.0; d];
        for j in 0..d {
            let gi = sig(affine(&cell.w_input, &cell.u_input, &cell.b_input, j));
            let gf = sig(affine(&cell.w_forget, &cell.u_forget, &cell.b_forget, j));
            let go = sig(affine(&cell.w_output, &cell.u_output, &cell.b_output, j));
            let gg = affine(&cell.w_cand, &cell.u_cand, &cell.b_cand, j).tanh();
            c_next[j] = gf * c[j] + gi * gg;
            h_next[j] = go * c_next[j].tanh();
        }
        (h_next, c_next)
    }

    /// Index-by-index recurrence over a whole sequence.
    fn naive_run(cell: &LstmCellParams, seq: &[Vec<f64>], direction: Direction) -> Vec<Vec<f64>> {
        let d = cell.hidden_dim;
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut out = vec![vec![0.0; d]; seq.len()];
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..seq.len()).collect(),
            Direction::Backward => (0..seq.len()).rev().collect(),
        };
        for t in order {
            let (h2, c2) = naive_step(cell, &seq[t], &h, &c);
            h = h2;
            c = c2;
            out[t] = h.clone();
        }
        out
    }

    /// Full fusion oracle: per-class, per-row and per-column naive sweeps,
    /// concatenation, projection, and sum.
    fn naive_fusion(
        features: &[f64], // [C, s, K] flattened
        classes: usize,
        rows: usize,
        cols: usize,
        width: usize,
        params: &CfBilstmParams,
    ) -> Vec<f64> {
        let s = rows * cols;
        let d = params.horizontal_fwd.hidden_dim;
        let token = |c: usize, i: usize| -> Vec<f64> {
            features[(c * s + i) * width..(c * s + i + 1) * width].to_vec()
        };
        let project = |hf: &[f64], hb: &[f64]| -> Vec<f64> {
            let w = params.fusion.w.values();
            let b = params.fusion.b.values();
            (0..width)
                .map(|j| {
                    let mut acc = b[j];
                    for p in 0..d {
                        acc += hf[p] * w[p * width + j];
                        acc += hb[p] * w[(d + p) * width + j];
                    }
                    acc
                })
                .collect()
        };
        let mut out = vec![0.0; classes * s * width];
        for c in 0..classes {
            // Horizontal sweeps per grid row.
            for r in 0..rows {
                let seq: Vec<Vec<f64>> = (0..cols).map(|col| token(c, r * cols + col)).collect();
                let hf = naive_run(&params.horizontal_fwd, &seq, Direction::Forward);
                let hb = naive_run(&params.horizontal_bwd, &seq, Direction::Backward);
                for col in 0..cols {
                    let proj = project(&hf[col], &hb[col]);
                    let base = (c * s + r * cols + col) * width;
                    for j in 0..width {
                        out[base + j] += proj[j];
                    }
                }
            }
            // Vertical sweeps per grid column.
            for col in 0..cols {
                let seq: Vec<Vec<f64>> = (0..rows).map(|r| token(c, r * cols + col)).collect();
                let vf = naive_run(&params.vertical_fwd, &seq, Direction::Forward);
                let vb = naive_run(&params.vertical_bwd, &seq, Direction::Backward);
                for r in 0..rows {
                    let proj = project(&vf[r], &vb[r]);
                    let base = (c * s + r * cols + col) * width;
                    for j in 0..width {
                        out[base + j] += proj[j];
                    }
                }
            }
        }
        out
    }

    fn stage_cell(tape: &mut Tape, cell: &LstmCellParams) -> CellVars {
        let mut stager = Stager::new(tape);
        cell.stage(&mut stager, "cell")
    }

    fn zero_cell(k: usize, d: usize, forget_bias: f64) -> LstmCellParams {
        let mut cell = LstmCellParams {
            w_input: Tensor::zeros(&[k, d]),
            u_input: Tensor::zeros(&[d, d]),
            b_input: Tensor::zeros(&[1, d]),
            w_forget: Tensor::zeros(&[k, d]),
            u_forget: Tensor::zeros(&[d, d]),
            b_forget: Tensor::zeros(&[1, d]),
            w_output: Tensor::zeros(&[k, d]),
            u_output: Tensor::zeros(&[d, d]),
            b_output: Tensor::zeros(&[1, d]),
            w_cand: Tensor::zeros(&[k, d]),
            u_cand: Tensor::zeros(&[d, d]),
            b_cand: Tensor::zeros(&[1, d]),
            input_dim: k,
            hidden_dim: d,
        };
        cell.b_forget = Tensor::full(&[1, d], forget_bias);
        cell
    }

    #[test]
    fn zero_cell_fixed_point() {
        for forget_bias in [0.0, 1.0] {
            let cell = zero_cell(3, 2, forget_bias);
            let mut tape = Tape::new();
            let vars = stage_cell(&mut tape, &cell);
            let x = tape.zeros(&[1, 3]);
            let h0 = tape.zeros(&[1, 2]);
            let c0 = tape.zeros(&[1, 2]);
            let (h, c) = lstm_cell(&mut tape, x, h0, c0, &vars).unwrap();
            assert_eq!(tape.values(h), &[0.0, 0.0]);
            assert_eq!(tape.values(c), &[0.0, 0.0]);
        }
    }

    #[test]
    fn saturated_gates_pass_candidate_through() {
        // Input and output gates pinned open, forget gate closed: from zero
        // state one step gives h = tanh(tanh(candidate affine)).
        let mut cell = zero_cell(1, 1, -30.0);
        cell.b_input = Tensor::full(&[1, 1], 30.0);
        cell.b_output = Tensor::full(&[1, 1], 30.0);
        cell.w_cand = Tensor::new(vec![0.8], &[1, 1]).unwrap();
        let x_val = 0.9;

        let mut tape = Tape::new();
        let vars = stage_cell(&mut tape, &cell);
        let x = tape.constant(vec![x_val], &[1, 1]).unwrap();
        let h0 = tape.zeros(&[1, 1]);
        let c0 = tape.zeros(&[1, 1]);
        let (h, _) = lstm_cell(&mut tape, x, h0, c0, &vars).unwrap();
        let g = (0.8 * x_val).tanh();
        let expected = g.tanh();
        assert!((tape.values(h)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn cell_matches_naive_step() {
        let mut rng = Rng::seeded(20);
        let cell = LstmCellParams::init(&mut rng, 5, 4);
        let x = Tensor::randn(&mut rng, &[1, 5], 1.0);
        let h0 = Tensor::randn(&mut rng, &[1, 4], 0.5);
        let c0 = Tensor::randn(&mut rng, &[1, 4], 0.5);
        let (h_exp, c_exp) = naive_step(&cell, x.values(), h0.values(), c0.values());

        let mut tape = Tape::new();
        let vars = stage_cell(&mut tape, &cell);
        let xv = tape.leaf(x);
        let hv = tape.leaf(h0);
        let cv = tape.leaf(c0);
        let (h, c) = lstm_cell(&mut tape, xv, hv, cv, &vars).unwrap();
        for (got, want) in tape.values(h).iter().zip(&h_exp) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.values(c).iter().zip(&c_exp) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn three_chained_steps_pass_gradcheck() {
        let mut rng = Rng::seeded(21);
        let cell = LstmCellParams::init(&mut rng, 3, 2);
        let seq = Tensor::randn(&mut rng, &[3, 3], 1.0);
        let cfg = GradcheckConfig {
            step: 1e-4,
            ..GradcheckConfig::default()
        };
        // With respect to the input sequence.
        let report = gradcheck(
            |tape, v| {
                let vars = stage_cell(tape, &cell);
                let out = run_direction(tape, v, &vars, Direction::Forward)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum(sq))
            },
            &seq,
            &cfg,
        )
        .unwrap();
        assert!(report.pass, "input gradcheck: {report:?}");

        // With respect to every cell parameter.
        let mut named: Vec<(String, Tensor)> = Vec::new();
        cell.visit("cell", &mut |name, t| named.push((name, t.clone())));
        for (name, tensor) in &named {
            let report = gradcheck(
                |tape, v| {
                    let mut stager = Stager::with_substitute(tape, name, v);
                    let vars = cell.stage(&mut stager, "cell");
                    let seqv = stager.tape().leaf(seq.clone());
                    let out = run_direction(stager.tape(), seqv, &vars, Direction::Forward)?;
                    let sq = stager.tape().mul(out, out)?;
                    Ok(stager.tape().sum(sq))
                },
                tensor,
                &cfg,
            )
            .unwrap();
            assert!(report.pass, "{name} gradcheck: {report:?}");
        }
    }

    #[test]
    fn run_direction_matches_naive_recurrence() {
        for seed in 0..10u64 {
            let mut rng = Rng::seeded(seed);
            let k = 1 + rng.below(4);
            let d = 1 + rng.below(4);
            let s = 1 + rng.below(16);
            let cell = LstmCellParams::init(&mut rng, k, d);
            let seq = Tensor::randn(&mut rng, &[s, k], 1.0);
            let seq_rows: Vec<Vec<f64>> = seq.values().chunks_exact(k).map(<[f64]>::to_vec).collect();
            for direction in [Direction::Forward, Direction::Backward] {
                let expected = naive_run(&cell, &seq_rows, direction);
                let mut tape = Tape::new();
                let vars = stage_cell(&mut tape, &cell);
                let seqv = tape.leaf(seq.clone());
                let out = run_direction(&mut tape, seqv, &vars, direction).unwrap();
                for (i, row) in tape.values(out).chunks_exact(d).enumerate() {
                    for (got, want) in row.iter().zip(&expected[i]) {
                        assert!(
                            (got - want).abs() < 1e-12,
                            "seed {seed} dir {direction:?} pos {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_element_sequence_directions_agree() {
        let mut rng = Rng::seeded(22);
        let cell = LstmCellParams::init(&mut rng, 4, 3);
        let seq = Tensor::randn(&mut rng, &[1, 4], 1.0);
        let mut tape = Tape::new();
        let vars = stage_cell(&mut tape, &cell);
        let seqv = tape.leaf(seq);
        let fwd = run_direction(&mut tape, seqv, &vars, Direction::Forward).unwrap();
        let bwd = run_direction(&mut tape, seqv, &vars, Direction::Backward).unwrap();
        assert_eq!(tape.values(fwd), tape.values(bwd));
    }

    #[test]
    fn backward_is_reversed_forward_on_reversed_input() {
        let mut rng = Rng::seeded(23);
        let (s, k, d) = (6, 3, 2);
        let cell = LstmCellParams::init(&mut rng, k, d);
        let seq = Tensor::randn(&mut rng, &[s, k], 1.0);
        let mut reversed = Vec::with_capacity(s * k);
        for t in (0..s).rev() {
            reversed.extend_from_slice(&seq.values()[t * k..(t + 1) * k]);
        }
        let reversed = Tensor::new(reversed, &[s, k]).unwrap();

        let mut tape = Tape::new();
        let vars = stage_cell(&mut tape, &cell);
        let seqv = tape.leaf(seq);
        let revv = tape.leaf(reversed);
        let bwd = run_direction(&mut tape, seqv, &vars, Direction::Backward).unwrap();
        let fwd_rev = run_direction(&mut tape, revv, &vars, Direction::Forward).unwrap();
        let bwd_vals = tape.values(bwd);
        let fwd_vals = tape.values(fwd_rev);
        for t in 0..s {
            assert_eq!(
                &bwd_vals[t * d..(t + 1) * d],
                &fwd_vals[(s - 1 - t) * d..(s - t) * d]
            );
        }
    }

    #[test]
    fn empty_sequence_is_a_contract_error() {
        let mut rng = Rng::seeded(24);
        let cell = LstmCellParams::init(&mut rng, 3, 2);
        let mut tape = Tape::new();
        let vars = stage_cell(&mut tape, &cell);
        let seqv = tape.zeros(&[0, 3]);
        assert!(run_direction(&mut tape, seqv, &vars, Direction::Forward).is_err());
    }

    #[test]
    fn fuse_project_zero_weight_gives_bias_rows() {
        let fusion = FusionParams {
            w: Tensor::zeros(&[4, 3]),
            b: Tensor::new(vec![0.5, -1.0, 2.0], &[1, 3]).unwrap(),
        };
        let mut tape = Tape::new();
        let mut stager = Stager::new(&mut tape);
        let vars = fusion.stage(&mut stager, "proj");
        let mut rng = Rng::seeded(25);
        let hf = tape.leaf(Tensor::randn(&mut rng, &[5, 2], 1.0));
        let hb = tape.leaf(Tensor::randn(&mut rng, &[5, 2], 1.0));
        let out = fuse_project(&mut tape, hf, hb, &vars).unwrap();
        for row in tape.values(out).chunks_exact(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn fuse_project_hand_numbers() {
        // d = 1, width = 2: out = [hf, hb] @ W + b.
        let fusion = FusionParams {
            w: Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap(),
            b: Tensor::new(vec![10.0, 20.0], &[1, 2]).unwrap(),
        };
        let mut tape = Tape::new();
        let mut stager = Stager::new(&mut tape);
        let vars = fusion.stage(&mut stager, "proj");
        let hf = tape.constant(vec![0.5], &[1, 1]).unwrap();
        let hb = tape.constant(vec![-1.0], &[1, 1]).unwrap();
        let out = fuse_project(&mut tape, hf, hb, &vars).unwrap();
        // [0.5, -1.0] @ [[1,2],[3,4]] + [10,20] = [0.5-3+10, 1-4+20]
        assert_eq!(tape.values(out), &[7.5, 17.0]);
    }

    fn random_features(
        rng: &mut Rng,
        classes: usize,
        rows: usize,
        cols: usize,
        width: usize,
    ) -> Tensor {
        Tensor::randn(rng, &[classes, rows * cols, width], 1.0)
    }

    fn run_fusion(
        params: &CfBilstmParams,
        features: &Tensor,
        classes: usize,
        rows: usize,
        cols: usize,
        width: usize,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut stager = Stager::new(&mut tape);
        let vars = params.stage(&mut stager, "fusion");
        let fv = tape.leaf(features.clone());
        let cond = ConditionedFeatures {
            features: fv,
            classes,
            rows,
            cols,
            width,
        };
        let fused = contextual_fusion(&mut tape, &cond, &vars).unwrap();
        tape.values(fused.features).to_vec()
    }

    #[test]
    fn two_by_two_grid_matches_hand_unrolled_oracle() {
        let mut rng = Rng::seeded(26);
        let (classes, rows, cols, width, d) = (1, 2, 2, 3, 1);
        let params = CfBilstmParams::init(&mut rng, width, d);
        let features = random_features(&mut rng, classes, rows, cols, width);
        let got = run_fusion(&params, &features, classes, rows, cols, width);
        let expected = naive_fusion(features.values(), classes, rows, cols, width, &params);
        for (g, w) in got.iter().zip(&expected) {
            assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
        }
    }

    #[test]
    fn general_grid_matches_naive_oracle() {
        for seed in 0..5u64 {
            let mut rng = Rng::seeded(300 + seed);
            let classes = 1 + rng.below(3);
            let rows = 1 + rng.below(4);
            let cols = 1 + rng.below(4);
            let width = 2 + rng.below(3);
            let d = 1 + rng.below(3);
            let params = CfBilstmParams::init(&mut rng, width, d);
            let features = random_features(&mut rng, classes, rows, cols, width);
            let got = run_fusion(&params, &features, classes, rows, cols, width);
            let expected = naive_fusion(features.values(), classes, rows, cols, width, &params);
            for (g, w) in got.iter().zip(&expected) {
                assert!((g - w).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn one_row_grid_vertical_degenerates_to_singletons() {
        let mut rng = Rng::seeded(27);
        let (classes, rows, cols, width, d) = (2, 1, 5, 3, 2);
        let params = CfBilstmParams::init(&mut rng, width, d);
        let features = random_features(&mut rng, classes, rows, cols, width);
        let got = run_fusion(&params, &features, classes, rows, cols, width);

        // Oracle built from the public single-sequence ops: horizontal is a
        // full-row sweep, vertical is a one-step pass per column.
        let s = rows * cols;
        let mut expected = vec![0.0; classes * s * width];
        let mut tape = Tape::new();
        let mut stager = Stager::new(&mut tape);
        let vars = params.stage(&mut stager, "fusion");
        for c in 0..classes {
            let start = c * s * width;
            let stream = Tensor::new(
                features.values()[start..start + s * width].to_vec(),
                &[s, width],
            )
            .unwrap();
            let sv = tape.leaf(stream);
            let hf = run_direction(&mut tape, sv, &vars.horizontal_fwd, Direction::Forward).unwrap();
            let hb = run_direction(&mut tape, sv, &vars.horizontal_bwd, Direction::Backward).unwrap();
            let h_proj = fuse_project(&mut tape, hf, hb, &vars.fusion).unwrap();
            // Each column is its own length-1 sequence: one cell step each.
            let mut v_rows = Vec::new();
            for i in 0..s {
                let tok = tape.slice(sv, 0, i, i + 1).unwrap();
                let h0 = tape.zeros(&[1, d]);
                let c0 = tape.zeros(&[1, d]);
                let (hvf, _) = lstm_cell(&mut tape, tok, h0, c0, &vars.vertical_fwd).unwrap();
                let h0b = tape.zeros(&[1, d]);
                let c0b = tape.zeros(&[1, d]);
                let (hvb, _) = lstm_cell(&mut tape, tok, h0b, c0b, &vars.vertical_bwd).unwrap();
                v_rows.push(fuse_project(&mut tape, hvf, hvb, &vars.fusion).unwrap());
            }
            let v_proj = tape.concat(&v_rows, 0).unwrap();
            let total = tape.add(h_proj, v_proj).unwrap();
            expected[start..start + s * width].copy_from_slice(tape.values(total));
        }
        for (g, w) in got.iter().zip(&expected) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposing_grid_and_swapping_orientations_transposes_output() {
        let mut rng = Rng::seeded(28);
        let (classes, rows, cols, width, d) = (2, 2, 3, 3, 2);
        let params = CfBilstmParams::init(&mut rng, width, d);
        let features = random_features(&mut rng, classes, rows, cols, width);
        let base = run_fusion(&params, &features, classes, rows, cols, width);

        // Transpose the grid and swap the orientation parameters.
        let s = rows * cols;
        let mut transposed = vec![0.0; classes * s * width];
        for c in 0..classes {
            for r in 0..rows {
                for col in 0..cols {
                    let src = (c * s + r * cols + col) * width;
                    let dst = (c * s + col * rows + r) * width;
                    transposed[dst..dst + width]
                        .copy_from_slice(&features.values()[src..src + width]);
                }
            }
        }
        let transposed = Tensor::new(transposed, &[classes, s, width]).unwrap();
        let swapped = CfBilstmParams {
            horizontal_fwd: params.vertical_fwd.clone(),
            horizontal_bwd: params.vertical_bwd.clone(),
            vertical_fwd: params.horizontal_fwd.clone(),
            vertical_bwd: params.horizontal_bwd.clone(),
            fusion: params.fusion.clone(),
        };
        let got = run_fusion(&swapped, &transposed, classes, cols, rows, width);
        for c in 0..classes {
            for r in 0..rows {
                for col in 0..cols {
                    let orig = (c * s + r * cols + col) * width;
                    let tr = (c * s + col * rows + r) * width;
                    assert_eq!(
                        &base[orig..orig + width],
                        &got[tr..tr + width],
                        "mismatch at class {c} position ({r}, {col})"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_state_is_causal() {
        let mut rng = Rng::seeded(29);
        let (s, k, d) = (6, 3, 2);
        let cell = LstmCellParams::init(&mut rng, k, d);
        let seq = Tensor::randn(&mut rng, &[s, k], 1.0);
        let run = |seq: &Tensor, direction: Direction| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = stage_cell(&mut tape, &cell);
            let sv = tape.leaf(seq.clone());
            let out = run_direction(&mut tape, sv, &vars, direction).unwrap();
            tape.values(out).to_vec()
        };
        let base_fwd = run(&seq, Direction::Forward);
        let base_bwd = run(&seq, Direction::Backward);

        // Perturb position 4; forward states at 0..4 must be bitwise
        // unchanged, backward states at 5.. must be bitwise unchanged.
        let mut perturbed = seq.clone();
        perturbed.values_mut()[4 * k] += 10.0;
        let fwd = run(&perturbed, Direction::Forward);
        let bwd = run(&perturbed, Direction::Backward);
        assert_eq!(&base_fwd[..4 * d], &fwd[..4 * d]);
        assert_ne!(&base_fwd[4 * d..], &fwd[4 * d..]);
        assert_eq!(&base_bwd[5 * d..], &bwd[5 * d..]);
        assert_ne!(&base_bwd[..5 * d], &bwd[..5 * d]);
    }

    #[test]
    fn class_streams_are_independent() {
        let mut rng = Rng::seeded(30);
        let (classes, rows, cols, width, d) = (3, 2, 2, 3, 2);
        let params = CfBilstmParams::init(&mut rng, width, d);
        let features = random_features(&mut rng, classes, rows, cols, width);
        let base = run_fusion(&params, &features, classes, rows, cols, width);

        let s = rows * cols;
        let mut perturbed = features.clone();
        // Hit class stream 2 hard.
        for v in &mut perturbed.values_mut()[2 * s * width..] {
            *v += 7.0;
        }
        let got = run_fusion(&params, &perturbed, classes, rows, cols, width);
        assert_eq!(
            &base[..2 * s * width],
            &got[..2 * s * width],
            "streams 0 and 1 must be bitwise unchanged"
        );
        assert_ne!(&base[2 * s * width..], &got[2 * s * width..]);
    }

    #[test]
    fn full_module_passes_gradcheck_on_two_by_two_grid() {
        let mut rng = Rng::seeded(31);
        let (classes, rows, cols, width, d) = (2, 2, 2, 3, 2);
        let params = CfBilstmParams::init(&mut rng, width, d);
        let features = random_features(&mut rng, classes, rows, cols, width);
        let cfg = GradcheckConfig {
            step: 1e-4,
            ..GradcheckConfig::default()
        };

        // Input side.
        let report = gradcheck(
            |tape, v| {
                let mut stager = Stager::new(tape);
                let vars = params.stage(&mut stager, "fusion");
                let cond = ConditionedFeatures {
                    features: v,
                    classes,
                    rows,
                    cols,
                    width,
                };
                let fused = contextual_fusion(tape, &cond, &vars)?;
                let sq = tape.mul(fused.features, fused.features)?;
                Ok(tape.sum(sq))
            },
            &features,
            &cfg,
        )
        .unwrap();
        assert!(report.pass, "input gradcheck: {report:?}");

        // Every parameter.
        let mut named: Vec<(String, Tensor)> = Vec::new();
        params.visit("fusion", &mut |name, t| named.push((name, t.clone())));
        for (name, tensor) in &named {
            let report = gradcheck(
                |tape, v| {
                    let mut stager = Stager::with_substitute(tape, name, v);
                    let vars = params.stage(&mut stager, "fusion");
                    let fv = stager.tape().leaf(features.clone());
                    let cond = ConditionedFeatures {
                        features: fv,
                        classes,
                        rows,
                        cols,
                        width,
                    };
                    let fused = contextual_fusion(stager.tape(), &cond, &vars)?;
                    let sq = stager.tape().mul(fused.features, fused.features)?;
                    Ok(stager.tape().sum(sq))
                },
                tensor,
                &cfg,
            )
            .unwrap();
            assert!(report.pass, "{name} gradcheck: {report:?}");
        }
    }
}
