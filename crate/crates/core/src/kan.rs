//! Kolmogorov-Arnold network with B-spline + SiLU edge activations.
//!
//! Every edge `(i → j)` of a layer carries its own activation
//! `φ(x) = α·spline(x; θ) + β·silu(x)` and node `j` sums its incoming edges.
//! The last KAN layer feeds an affine map `W·h + b` that produces Q-values.
//!
//! All parameters live in one flat vector so optimizers and gradient checks
//! can treat the network as a point in `R^n`. Per layer the block order is
//! `θ` (edge-major, `G + k` coefficients per edge), then `α`, then `β`;
//! `W` (row-major, one row per output) and `b` follow the last layer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnet::QFunction;

/// Uniform B-spline grid on `[lo, hi]` with `g` intervals and order `k`,
/// extended by `k` knots on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct SplineGrid {
    lo: f64,
    hi: f64,
    g: usize,
    k: usize,
    knots: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct GridSpec {
    lo: f64,
    hi: f64,
    grid_size: usize,
    order: usize,
}

impl TryFrom<GridSpec> for SplineGrid {
    type Error = Error;
    fn try_from(s: GridSpec) -> Result<Self> {
        SplineGrid::new(s.lo, s.hi, s.grid_size, s.order)
    }
}

impl From<SplineGrid> for GridSpec {
    fn from(g: SplineGrid) -> Self {
        GridSpec { lo: g.lo, hi: g.hi, grid_size: g.g, order: g.k }
    }
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, grid_size: usize, order: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidConfig(format!("spline domain [{lo}, {hi}] is empty")));
        }
        if grid_size == 0 || order == 0 {
            return Err(Error::InvalidConfig("grid size and spline order must be >= 1".into()));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..grid_size + 2 * order + 1)
            .map(|m| lo + (m as f64 - order as f64) * h)
            .collect();
        Ok(Self { lo, hi, g: grid_size, k: order, knots })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn grid_size(&self) -> usize {
        self.g
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.g + self.k
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / self.g as f64
    }

    /// The `k + 1` basis functions that can be non-zero at `x` (after clamping
    /// to the domain), written to `vals`, and their x-derivatives to `ders`.
    /// Returns the index of the first of them. Derivatives are zero outside
    /// the domain because the clamp is flat there.
    pub fn local_basis(&self, x: f64, vals: &mut [f64], ders: Option<&mut [f64]>) -> usize {
        let k = self.k;
        debug_assert!(vals.len() == k + 1);
        let inside = x >= self.lo && x <= self.hi;
        let u = x.clamp(self.lo, self.hi);
        let interval = (((u - self.lo) / self.step()).floor() as usize).min(self.g - 1);
        let span = interval + k;
        let t = &self.knots;

        // de Boor's triangular scheme; `lower` keeps the order k-1 values.
        let mut left = [0.0f64; 16];
        let mut right = [0.0f64; 16];
        let mut lower = [0.0f64; 16];
        vals.fill(0.0);
        vals[0] = 1.0;
        for j in 1..=k {
            if j == k {
                lower[..k].copy_from_slice(&vals[..k]);
            }
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        if let Some(ders) = ders {
            if k == 0 || !inside {
                ders.fill(0.0);
            } else {
                // uniform knots: dB_{i,k}/dx = (B_{i,k-1} - B_{i+1,k-1}) / h
                let inv_h = 1.0 / self.step();
                for r in 0..=k {
                    let a = if r >= 1 { lower[r - 1] } else { 0.0 };
                    let b = if r < k { lower[r] } else { 0.0 };
                    ders[r] = (a - b) * inv_h;
                }
            }
        }
        span - k
    }

    /// Dense vector of all `G + k` basis values at `x`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut local = vec![0.0; self.k + 1];
        let first = self.local_basis(x, &mut local, None);
        let mut out = vec![0.0; self.num_basis()];
        out[first..first + self.k + 1].copy_from_slice(&local);
        out
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Largest slope of SiLU over the real line (attained near x ≈ 2.4).
pub const SILU_LIPSCHITZ: f64 = 1.0998;

/// Parameters of one edge activation.
#[derive(Clone, Debug, PartialEq)]
pub struct KanUnit {
    pub theta: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl KanUnit {
    pub fn spline(&self, x: f64, grid: &SplineGrid) -> f64 {
        grid.basis(x).iter().zip(&self.theta).map(|(b, t)| b * t).sum()
    }
}

/// `α·spline(x; θ) + β·silu(x)`.
pub fn kan_activation(x: f64, unit: &KanUnit, grid: &SplineGrid) -> f64 {
    unit.alpha * unit.spline(x, grid) + unit.beta * silu(x)
}

/// Identifies one edge activation: `edge = input * out_width + output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub edge: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KanConfig {
    pub hidden: Vec<usize>,
    pub grid_size: usize,
    pub order: usize,
    pub lo: f64,
    pub hi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_bound: f64,
    pub beta_bound: f64,
    pub share_groups: Vec<Vec<UnitId>>,
}

impl Default for KanConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            grid_size: 5,
            order: 3,
            lo: -1.0,
            hi: 1.0,
            lambda1: 1e-5,
            lambda2: 1e-6,
            alpha_bound: 10.0,
            beta_bound: 10.0,
            share_groups: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct LayerInfo {
    input: usize,
    output: usize,
    offset: usize,
}

impl LayerInfo {
    fn edges(&self) -> usize {
        self.input * self.output
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanNetwork {
    grid: SplineGrid,
    widths: Vec<usize>,
    outputs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_bound: f64,
    pub beta_bound: f64,
    share_groups: Vec<Vec<UnitId>>,
    params: Vec<f64>,
    #[serde(skip)]
    layers: Vec<LayerInfo>,
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct KanTape {
    /// Input to each KAN layer, then the final hidden vector.
    acts: Vec<Vec<f64>>,
    first: Vec<Vec<usize>>,
    basis: Vec<Vec<f64>>,
    dbasis: Vec<Vec<f64>>,
    spline: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl KanNetwork {
    /// Random initialisation: `α = 1`, small spline coefficients, SiLU and
    /// output weights scaled by fan-in, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, outputs: usize, config: &KanConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input, outputs, config)?;
        let c = net.grid.num_basis();
        for l in 0..net.layers.len() {
            let info = net.layers[l];
            let scale = 1.0 / (info.input as f64).sqrt();
            let e = info.edges();
            for v in &mut net.params[info.offset..info.offset + e * c] {
                *v = rng.random_range(-0.1..0.1) * scale;
            }
            let alpha = info.offset + e * c;
            net.params[alpha..alpha + e].fill(1.0);
            for v in &mut net.params[alpha + e..alpha + 2 * e] {
                *v = rng.random_range(-scale..scale);
            }
        }
        let (w, _) = net.output_offsets();
        let last = *net.widths.last().unwrap();
        let scale = 1.0 / (last as f64).sqrt();
        for v in &mut net.params[w..w + outputs * last] {
            *v = rng.random_range(-scale..scale);
        }
        net.apply_sharing()?;
        Ok(net)
    }

    /// Network with every parameter zero.
    pub fn zeros(input: usize, outputs: usize, config: &KanConfig) -> Result<Self> {
        if input == 0 || outputs == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let grid = SplineGrid::new(config.lo, config.hi, config.grid_size, config.order)?;
        let mut widths = vec![input];
        widths.extend(&config.hidden);
        if widths.len() == 1 {
            // a single KAN layer straight onto the outputs
            widths.push(outputs);
        }
        let mut net = Self {
            grid,
            widths,
            outputs,
            lambda1: config.lambda1,
            lambda2: config.lambda2,
            alpha_bound: config.alpha_bound,
            beta_bound: config.beta_bound,
            share_groups: config.share_groups.clone(),
            params: Vec::new(),
            layers: Vec::new(),
        };
        net.rebuild_layout();
        net.params = vec![0.0; net.expected_len()];
        for group in &net.share_groups {
            for u in group {
                if u.layer >= net.layers.len() || u.edge >= net.layers[u.layer].edges() {
                    return Err(Error::InvalidConfig(format!("share group refers to missing unit {u:?}")));
                }
            }
        }
        Ok(net)
    }

    fn rebuild_layout(&mut self) {
        let c = self.grid.num_basis();
        let mut offset = 0;
        self.layers = self
            .widths
            .windows(2)
            .map(|w| {
                let info = LayerInfo { input: w[0], output: w[1], offset };
                offset += info.edges() * (c + 2);
                info
            })
            .collect();
    }

    fn expected_len(&self) -> usize {
        let (w, b) = self.output_offsets();
        debug_assert!(b > w);
        b + self.outputs
    }

    fn output_offsets(&self) -> (usize, usize) {
        let c = self.grid.num_basis();
        let w = self.layers.last().map_or(0, |l| l.offset + l.edges() * (c + 2));
        (w, w + self.outputs * self.widths.last().unwrap())
    }

    /// Restore the derived layout after deserialization and check the vector length.
    pub fn validate(&mut self) -> Result<()> {
        self.rebuild_layout();
        if self.params.len() != self.expected_len() {
            return Err(Error::Checkpoint(format!(
                "parameter vector has {} entries, layout needs {}",
                self.params.len(),
                self.expected_len()
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> &SplineGrid {
        &self.grid
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_edges(&self, layer: usize) -> usize {
        self.layers[layer].edges()
    }

    fn theta_range(&self, u: UnitId) -> std::ops::Range<usize> {
        let c = self.grid.num_basis();
        let start = self.layers[u.layer].offset + u.edge * c;
        start..start + c
    }

    fn alpha_index(&self, u: UnitId) -> usize {
        let info = self.layers[u.layer];
        info.offset + info.edges() * self.grid.num_basis() + u.edge
    }

    fn beta_index(&self, u: UnitId) -> usize {
        self.alpha_index(u) + self.layers[u.layer].edges()
    }

    pub fn unit(&self, u: UnitId) -> KanUnit {
        KanUnit {
            theta: self.params[self.theta_range(u)].to_vec(),
            alpha: self.params[self.alpha_index(u)],
            beta: self.params[self.beta_index(u)],
        }
    }

    pub fn set_unit(&mut self, u: UnitId, unit: &KanUnit) {
        let r = self.theta_range(u);
        self.params[r].copy_from_slice(&unit.theta);
        let (a, b) = (self.alpha_index(u), self.beta_index(u));
        self.params[a] = unit.alpha;
        self.params[b] = unit.beta;
    }

    pub fn theta_mut(&mut self, u: UnitId) -> &mut [f64] {
        let r = self.theta_range(u);
        &mut self.params[r]
    }

    pub fn output_weights(&self) -> (&[f64], &[f64]) {
        let (w, b) = self.output_offsets();
        (&self.params[w..b], &self.params[b..])
    }

    pub fn output_weights_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.output_offsets();
        let (head, bias) = self.params.split_at_mut(b);
        (&mut head[w..], bias)
    }

    /// Indices of every spline coefficient in the flat parameter vector.
    pub fn theta_indices(&self) -> Vec<usize> {
        let c = self.grid.num_basis();
        self.layers
            .iter()
            .flat_map(|l| l.offset..l.offset + l.edges() * c)
            .collect()
    }

    pub fn share_groups(&self) -> &[Vec<UnitId>] {
        &self.share_groups
    }

    pub fn set_share_groups(&mut self, groups: Vec<Vec<UnitId>>) {
        self.share_groups = groups;
    }

    /// Replace the coefficients of every unit in a share group by the group mean.
    pub fn apply_sharing(&mut self) -> Result<()> {
        let c = self.grid.num_basis();
        for (gi, group) in self.share_groups.clone().iter().enumerate() {
            if group.is_empty() {
                return Err(Error::EmptyGroup(gi));
            }
            let mut mean = vec![0.0; c];
            for &u in group {
                for (m, t) in mean.iter_mut().zip(&self.params[self.theta_range(u)]) {
                    *m += t;
                }
            }
            let n = group.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            for &u in group {
                self.theta_mut(u).copy_from_slice(&mean);
            }
        }
        Ok(())
    }

    /// Clamp every `α` and `β` into their declared bounds.
    pub fn project_bounds(&mut self) {
        let c = self.grid.num_basis();
        for info in self.layers.clone() {
            let e = info.edges();
            let a = info.offset + e * c;
            for v in &mut self.params[a..a + e] {
                *v = v.clamp(-self.alpha_bound, self.alpha_bound);
            }
            for v in &mut self.params[a + e..a + 2 * e] {
                *v = v.clamp(-self.beta_bound, self.beta_bound);
            }
        }
    }

    pub fn max_abs_alpha(&self) -> f64 {
        self.layer_param_max(0)
    }

    pub fn max_abs_beta(&self) -> f64 {
        self.layer_param_max(1)
    }

    fn layer_param_max(&self, which: usize) -> f64 {
        let c = self.grid.num_basis();
        self.layers
            .iter()
            .flat_map(|l| {
                let e = l.edges();
                let start = l.offset + e * c + which * e;
                self.params[start..start + e].iter().map(|v| v.abs())
            })
            .fold(0.0, f64::max)
    }

    fn theta_block(&self, layer: usize) -> &[f64] {
        let info = self.layers[layer];
        &self.params[info.offset..info.offset + info.edges() * self.grid.num_basis()]
    }

    /// `λ1·Σ|θ| + λ2·Σ_i Σ_{j≠i} |θ_i − θ_j|`, the pairwise sum running over
    /// units of the same layer, coefficient by coefficient.
    pub fn regularization(&self) -> f64 {
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return 0.0;
        }
        let c = self.grid.num_basis();
        (0..self.layers.len())
            .map(|l| coefficient_penalty(self.theta_block(l), c, self.lambda1, self.lambda2))
            .sum()
    }

    pub fn add_regularization_grad(&self, grad: &mut [f64]) {
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return;
        }
        let c = self.grid.num_basis();
        for info in &self.layers {
            let range = info.offset..info.offset + info.edges() * c;
            coefficient_penalty_grad(&self.params[range.clone()], c, self.lambda1, self.lambda2, &mut grad[range]);
        }
    }

    pub fn forward_tape(&self, x: &[f64], tape: &mut KanTape) -> Result<()> {
        if x.len() != self.widths[0] {
            return Err(Error::WidthMismatch { expected: self.widths[0], got: x.len() });
        }
        let c = self.grid.num_basis();
        let kp1 = self.grid.order() + 1;
        let nl = self.layers.len();
        tape.acts.resize(nl + 1, Vec::new());
        tape.first.resize(nl, Vec::new());
        tape.basis.resize(nl, Vec::new());
        tape.dbasis.resize(nl, Vec::new());
        tape.spline.resize(nl, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);

        for (l, info) in self.layers.iter().enumerate() {
            let (n_in, n_out, e) = (info.input, info.output, info.edges());
            let theta = &self.params[info.offset..info.offset + e * c];
            let alpha = &self.params[info.offset + e * c..info.offset + e * (c + 1)];
            let beta = &self.params[info.offset + e * (c + 1)..info.offset + e * (c + 2)];

            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            out.resize(n_out, 0.0);
            let first = &mut tape.first[l];
            first.resize(n_in, 0);
            let basis = &mut tape.basis[l];
            basis.resize(n_in * kp1, 0.0);
            let dbasis = &mut tape.dbasis[l];
            dbasis.resize(n_in * kp1, 0.0);
            let spline = &mut tape.spline[l];
            spline.resize(e, 0.0);

            for i in 0..n_in {
                let xi = input[i];
                let b = &mut basis[i * kp1..(i + 1) * kp1];
                let db = &mut dbasis[i * kp1..(i + 1) * kp1];
                let f = self.grid.local_basis(xi, b, Some(db));
                first[i] = f;
                let s = silu(xi);
                for j in 0..n_out {
                    let edge = i * n_out + j;
                    let th = &theta[edge * c + f..edge * c + f + kp1];
                    let sp: f64 = th.iter().zip(b.iter()).map(|(t, v)| t * v).sum();
                    spline[edge] = sp;
                    out[j] += alpha[edge] * sp + beta[edge] * s;
                }
            }
        }

        let hidden = &tape.acts[nl];
        let (wo, bo) = self.output_offsets();
        let w = &self.params[wo..bo];
        let b = &self.params[bo..];
        let m = hidden.len();
        tape.out.clear();
        tape.out.extend((0..self.outputs).map(|o| {
            b[o] + w[o * m..(o + 1) * m].iter().zip(hidden).map(|(a, h)| a * h).sum::<f64>()
        }));
        Ok(())
    }

    /// Accumulate `upstreamᵀ·∂q/∂params` into `grad`.
    pub fn backward(&self, tape: &KanTape, upstream: &[f64], grad: &mut [f64]) {
        let c = self.grid.num_basis();
        let kp1 = self.grid.order() + 1;
        let nl = self.layers.len();
        let (wo, bo) = self.output_offsets();
        let hidden = &tape.acts[nl];
        let m = hidden.len();

        let mut g = vec![0.0; m];
        for (o, &go) in upstream.iter().enumerate() {
            grad[bo + o] += go;
            let w = &self.params[wo + o * m..wo + (o + 1) * m];
            let gw = &mut grad[wo + o * m..wo + (o + 1) * m];
            for q in 0..m {
                gw[q] += go * hidden[q];
                g[q] += go * w[q];
            }
        }

        for l in (0..nl).rev() {
            let info = self.layers[l];
            let (n_in, n_out, e) = (info.input, info.output, info.edges());
            let off = info.offset;
            let input = &tape.acts[l];
            let (first, basis, dbasis, spline) = (&tape.first[l], &tape.basis[l], &tape.dbasis[l], &tape.spline[l]);
            let mut gx = vec![0.0; n_in];
            for i in 0..n_in {
                let xi = input[i];
                let (s, ds) = (silu(xi), silu_grad(xi));
                let f = first[i];
                let b = &basis[i * kp1..(i + 1) * kp1];
                let db = &dbasis[i * kp1..(i + 1) * kp1];
                let mut acc = 0.0;
                for j in 0..n_out {
                    let gj = g[j];
                    if gj == 0.0 {
                        continue;
                    }
                    let edge = i * n_out + j;
                    let a = self.params[off + e * c + edge];
                    let bt = self.params[off + e * (c + 1) + edge];
                    grad[off + e * c + edge] += gj * spline[edge];
                    grad[off + e * (c + 1) + edge] += gj * s;
                    let base = off + edge * c + f;
                    let th = &self.params[base..base + kp1];
                    let gth = &mut grad[base..base + kp1];
                    let mut dsp = 0.0;
                    for r in 0..kp1 {
                        gth[r] += gj * a * b[r];
                        dsp += th[r] * db[r];
                    }
                    acc += gj * (a * dsp + bt * ds);
                }
                gx[i] = acc;
            }
            g = gx;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = KanTape::default();
        self.forward_tape(x, &mut tape)?;
        Ok(tape.out)
    }
}

impl KanTape {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// `λ1·Σ|θ| + λ2·Σ_i Σ_{j≠i} |θ_i − θ_j|` over `units` consecutive coefficient
/// vectors of length `c` stored in `theta`. The pairwise sum is evaluated per
/// coefficient index by sorting, `O(n log n)` instead of `O(n²)`.
pub fn coefficient_penalty(theta: &[f64], c: usize, lambda1: f64, lambda2: f64) -> f64 {
    let l1: f64 = theta.iter().map(|t| t.abs()).sum();
    if lambda2 == 0.0 {
        return lambda1 * l1;
    }
    let n = theta.len() / c;
    let mut col = vec![0.0; n];
    let mut pair = 0.0;
    for k in 0..c {
        for (u, v) in col.iter_mut().enumerate() {
            *v = theta[u * c + k];
        }
        col.sort_by(f64::total_cmp);
        // Σ_{i<j} (a_j − a_i) = Σ_r (2r − n + 1)·a_(r)
        pair += col
            .iter()
            .enumerate()
            .map(|(r, a)| (2.0 * r as f64 - n as f64 + 1.0) * a)
            .sum::<f64>();
    }
    lambda1 * l1 + lambda2 * 2.0 * pair
}

/// Subgradient of [`coefficient_penalty`] (zero at every kink), added into `grad`.
pub fn coefficient_penalty_grad(theta: &[f64], c: usize, lambda1: f64, lambda2: f64, grad: &mut [f64]) {
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += lambda1 * sign(*t);
    }
    if lambda2 == 0.0 {
        return;
    }
    let n = theta.len() / c;
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..c {
        order.sort_by(|&a, &b| theta[a * c + k].total_cmp(&theta[b * c + k]));
        // d/dθ_u of Σ_i Σ_{j≠i} |θ_i − θ_j| = 2·(#below − #above), ties excluded
        let mut r = 0;
        while r < n {
            let v = theta[order[r] * c + k];
            let mut end = r + 1;
            while end < n && theta[order[end] * c + k] == v {
                end += 1;
            }
            let below = r as f64;
            let above = (n - end) as f64;
            for &u in &order[r..end] {
                grad[u * c + k] += lambda2 * 2.0 * (below - above);
            }
            r = end;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Least-squares spline coefficients for samples `(xs, ys)` on `grid`.
pub fn fit_spline_least_squares(grid: &SplineGrid, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let n = grid.num_basis();
    if xs.len() != ys.len() || xs.len() < n {
        return Err(Error::InvalidConfig(format!("need at least {n} paired samples")));
    }
    let design = DMatrix::from_fn(xs.len(), n, |r, c| grid.basis(xs[r])[c]);
    let rhs = DVector::from_column_slice(ys);
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::InvalidConfig(format!("least squares failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

impl QFunction for KanNetwork {
    type Tape = KanTape;

    fn input_width(&self) -> usize {
        self.widths[0]
    }

    fn output_width(&self) -> usize {
        self.outputs
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_tape(&self, x: &[f64], tape: &mut KanTape) -> Result<()> {
        KanNetwork::forward_tape(self, x, tape)
    }

    fn tape_output(tape: &KanTape) -> &[f64] {
        &tape.out
    }

    fn backward(&self, tape: &KanTape, upstream: &[f64], grad: &mut [f64]) {
        KanNetwork::backward(self, tape, upstream, grad)
    }

    fn regularization(&self) -> f64 {
        KanNetwork::regularization(self)
    }

    fn add_regularization_grad(&self, grad: &mut [f64]) {
        KanNetwork::add_regularization_grad(self, grad)
    }

    fn after_update(&mut self) -> Result<()> {
        self.project_bounds();
        self.apply_sharing()
    }

    fn validate(&mut self) -> Result<()> {
        KanNetwork::validate(self)
    }
}
