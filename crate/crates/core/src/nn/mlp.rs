use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::{fnv_mix, fnv_start, matmul, matmul_at_acc, matmul_bt, Tensor};

/// Widths of a conditioned MLP.
///
/// The network reads one row `[input ‖ cond ‖ embed]`. Every hidden layer is
/// a linear map followed by a FiLM modulation driven by the `embed` columns
/// and a SiLU: `h = silu(a ⊙ (1 + scale(e)) + shift(e))`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub cond: usize,
    pub embed: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn in_width(&self) -> usize {
        self.input + self.cond + self.embed
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Linear {
    fn size(inp: usize, out: usize) -> usize {
        inp * out + out
    }
}

#[derive(Clone, Debug)]
struct Block {
    lin: Linear,
    scale: Linear,
    shift: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
    out: Linear,
    total: usize,
}

impl Layout {
    fn new(spec: &MlpSpec) -> Self {
        let mut off = 0;
        let mut take = |inp: usize, out: usize| {
            let l = Linear {
                w: off,
                b: off + inp * out,
                inp,
                out,
            };
            off += Linear::size(inp, out);
            l
        };
        let mut prev = spec.in_width();
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        for &h in &spec.hidden {
            let lin = take(prev, h);
            let scale = take(spec.embed, h);
            let shift = take(spec.embed, h);
            blocks.push(Block { lin, scale, shift });
            prev = h;
        }
        let out = take(prev, spec.output);
        Layout {
            blocks,
            out,
            total: off,
        }
    }
}

/// Parameters of one MLP, stored flat in declaration order: for each hidden
/// layer `(W, b, W_scale, b_scale, W_shift, b_shift)`, then `(W_out, b_out)`.
/// Weight matrices are `[out, in]` row-major.
#[derive(Clone, Debug)]
pub struct MlpParams {
    spec: MlpSpec,
    seed: u64,
    data: Vec<f64>,
    layout: Layout,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

/// Gradients with the same flat layout as the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Activations retained by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    fingerprint: u64,
    rows: usize,
    /// Input of each linear layer; `z[0]` is the network input.
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    gain: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    e: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl MlpParams {
    /// He-normal hidden weights, small FiLM weights, zero biases. Fully
    /// determined by `seed`.
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let layout = Layout::new(&spec);
        let mut data = vec![0.0; layout.total];
        let mut rng = stream_rng(seed, stream::INIT_PARAMS);
        let mut fill = |l: &Linear, std: f64, data: &mut [f64]| {
            for v in &mut data[l.w..l.w + l.inp * l.out] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        for blk in &layout.blocks {
            fill(&blk.lin, (2.0 / blk.lin.inp.max(1) as f64).sqrt(), &mut data);
            let film_std = 0.1 / (spec.embed.max(1) as f64).sqrt();
            fill(&blk.scale, film_std, &mut data);
            fill(&blk.shift, film_std, &mut data);
        }
        let o = layout.out;
        fill(&o, 0.1 / (o.inp.max(1) as f64).sqrt(), &mut data);
        Self {
            spec,
            seed,
            data,
            layout,
        }
    }

    /// Build from an explicit flat vector.
    pub fn from_flat(spec: MlpSpec, seed: u64, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&spec);
        if data.len() != layout.total {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self {
            spec,
            seed,
            data,
            layout,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv_start();
        for &v in &self.data {
            h = fnv_mix(h, v.to_bits());
        }
        h
    }

    /// Weight matrix `[out, in]` of hidden layer `l`, or of the output layer
    /// when `l == hidden.len()`.
    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let lin = self.linear(l);
        &mut self.data[lin.w..lin.w + lin.inp * lin.out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let lin = self.linear(l);
        &mut self.data[lin.b..lin.b + lin.out]
    }

    fn linear(&self, l: usize) -> Linear {
        if l < self.layout.blocks.len() {
            self.layout.blocks[l].lin
        } else {
            self.layout.out
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.spec.in_width() {
            return Err(Error::shape(format!(
                "network expects input width {}, got {}",
                self.spec.in_width(),
                x.cols()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * l.out];
        matmul_bt(x, &self.data[l.w..l.b], rows, l.inp, l.out, &mut y);
        let b = &self.data[l.b..l.b + l.out];
        for r in 0..rows {
            for (v, bj) in y[r * l.out..(r + 1) * l.out].iter_mut().zip(b) {
                *v += bj;
            }
        }
        y
    }

    fn embed_cols(&self, x: &Tensor) -> Vec<f64> {
        let e = self.spec.embed;
        let w = self.spec.in_width();
        let mut out = Vec::with_capacity(x.rows() * e);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[w - e..w]);
        }
        out
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<Tape>)> {
        self.check_input(x)?;
        let rows = x.rows();
        let e = self.embed_cols(x);
        let mut tape = Tape {
            fingerprint: if keep { self.fingerprint() } else { 0 },
            rows,
            z: Vec::new(),
            a: Vec::new(),
            gain: Vec::new(),
            m: Vec::new(),
            e: Vec::new(),
        };
        let mut z = x.data().to_vec();
        for blk in &self.layout.blocks {
            let a = self.affine(&blk.lin, &z, rows);
            let gain = self.affine(&blk.scale, &e, rows);
            let shift = self.affine(&blk.shift, &e, rows);
            let m: Vec<f64> = a
                .iter()
                .zip(&gain)
                .zip(&shift)
                .map(|((&a, &g), &s)| a * (1.0 + g) + s)
                .collect();
            let next: Vec<f64> = m.iter().map(|&v| silu(v)).collect();
            if keep {
                tape.z.push(std::mem::replace(&mut z, next));
                tape.a.push(a);
                tape.gain.push(gain);
                tape.m.push(m);
            } else {
                z = next;
            }
        }
        let out = self.affine(&self.layout.out, &z, rows);
        if keep {
            tape.z.push(z);
            tape.e = e;
        }
        let shape = if x.shape().len() == 1 {
            vec![self.spec.output]
        } else {
            vec![rows, self.spec.output]
        };
        Ok((Tensor::new(shape, out)?, keep.then_some(tape)))
    }

    /// Forward pass retaining activations for `backward`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let (y, tape) = self.run(x, true)?;
        Ok((y, tape.expect("tape requested")))
    }

    /// Forward pass without a tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    /// Exact gradients of `sum(d_out ⊙ output)` with respect to the
    /// parameters and the network input.
    pub fn backward(&self, tape: &Tape, d_out: &Tensor) -> Result<(Gradients, Tensor)> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::StaleTape);
        }
        let rows = tape.rows;
        if d_out.rows() != rows || d_out.cols() != self.spec.output {
            return Err(Error::shape("backward: upstream gradient shape"));
        }
        let mut g = self.zero_grads();
        let e_w = self.spec.embed;
        let mut de = vec![0.0; rows * e_w];

        let o = self.layout.out;
        let dy = d_out.data();
        let z_last = tape.z.last().expect("tape holds the final activation");
        matmul_at_acc(dy, z_last, rows, o.out, o.inp, &mut g.data[o.w..o.b]);
        col_sums(dy, rows, o.out, &mut g.data[o.b..o.b + o.out]);
        let mut dz = vec![0.0; rows * o.inp];
        matmul(dy, &self.data[o.w..o.b], rows, o.out, o.inp, &mut dz);

        for (l, blk) in self.layout.blocks.iter().enumerate().rev() {
            let (a, gain, m) = (&tape.a[l], &tape.gain[l], &tape.m[l]);
            let h = blk.lin.out;
            let mut da = vec![0.0; rows * h];
            let mut dgain = vec![0.0; rows * h];
            let mut dshift = vec![0.0; rows * h];
            for i in 0..rows * h {
                let dm = dz[i] * silu_grad(m[i]);
                da[i] = dm * (1.0 + gain[i]);
                dgain[i] = dm * a[i];
                dshift[i] = dm;
            }
            let lin = blk.lin;
            matmul_at_acc(&da, &tape.z[l], rows, h, lin.inp, &mut g.data[lin.w..lin.b]);
            col_sums(&da, rows, h, &mut g.data[lin.b..lin.b + h]);
            for (lin, d) in [(blk.scale, &dgain), (blk.shift, &dshift)] {
                matmul_at_acc(d, &tape.e, rows, h, e_w, &mut g.data[lin.w..lin.b]);
                col_sums(d, rows, h, &mut g.data[lin.b..lin.b + h]);
                let mut de_part = vec![0.0; rows * e_w];
                matmul(d, &self.data[lin.w..lin.b], rows, h, e_w, &mut de_part);
                for (x, y) in de.iter_mut().zip(&de_part) {
                    *x += y;
                }
            }
            let mut dz_prev = vec![0.0; rows * lin.inp];
            matmul(&da, &self.data[lin.w..lin.b], rows, h, lin.inp, &mut dz_prev);
            dz = dz_prev;
        }

        let w = self.spec.in_width();
        for r in 0..rows {
            for k in 0..e_w {
                dz[r * w + (w - e_w) + k] += de[r * e_w + k];
            }
        }
        Ok((g, Tensor::from_rows(rows, w, dz)?))
    }
}

fn col_sums(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(hidden: Vec<usize>) -> MlpSpec {
        MlpSpec {
            input: 3,
            cond: 2,
            embed: 4,
            hidden,
            output: 2,
        }
    }

    fn loss(p: &MlpParams, x: &Tensor, w: &Tensor) -> f64 {
        let y = p.predict(x).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    fn input(rows: usize, seed: u64) -> Tensor {
        Tensor::randn(&[rows, 9], &mut stream_rng(seed, 99))
    }

    #[test]
    fn zero_hidden_identity_returns_input() {
        let s = MlpSpec {
            input: 3,
            cond: 0,
            embed: 0,
            hidden: vec![],
            output: 3,
        };
        let mut p = MlpParams::init(s, 1);
        let w = p.weight_mut(0);
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        p.bias_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::from_rows(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        assert_eq!(p.predict(&x).unwrap(), x);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let p = MlpParams::init(spec(vec![4]), 1);
        assert!(p.predict(&Tensor::zeros(&[1, 8])).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(
            MlpParams::init(spec(vec![5, 4]), 3),
            MlpParams::init(spec(vec![5, 4]), 3)
        );
        assert_ne!(
            MlpParams::init(spec(vec![5, 4]), 3),
            MlpParams::init(spec(vec![5, 4]), 4)
        );
    }

    #[test]
    fn stale_tape_is_refused() {
        let mut p = MlpParams::init(spec(vec![4]), 1);
        let x = input(2, 1);
        let (_, tape) = p.forward(&x).unwrap();
        p.flat_mut()[0] += 1e-3;
        let d = Tensor::zeros(&[2, 2]);
        assert!(matches!(p.backward(&tape, &d), Err(Error::StaleTape)));
    }

    #[test]
    fn tape_output_matches_predict() {
        let p = MlpParams::init(spec(vec![6, 5]), 2);
        let x = input(3, 2);
        let (y, _) = p.forward(&x).unwrap();
        assert_eq!(y, p.predict(&x).unwrap());
    }

    fn check_grads(hidden: Vec<usize>, rows: usize, seed: u64) {
        let mut p = MlpParams::init(spec(hidden), seed);
        // Non-trivial FiLM and biases so every path carries gradient.
        let mut r = stream_rng(seed, 7);
        for v in p.flat_mut() {
            *v += 0.2 * r.sample::<f64, _>(StandardNormal);
        }
        let x = input(rows, seed + 1);
        let w = Tensor::randn(&[rows, 2], &mut r);
        let (_, tape) = p.forward(&x).unwrap();
        let (g, dx) = p.backward(&tape, &w).unwrap();
        let h = 1e-6;
        for i in 0..p.flat().len() {
            let mut pp = p.clone();
            pp.flat_mut()[i] += h;
            let mut pm = p.clone();
            pm.flat_mut()[i] -= h;
            let fd = (loss(&pp, &x, &w) - loss(&pm, &x, &w)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!(
                (fd - g.data[i]).abs() < tol,
                "param {i}: fd {fd} vs analytic {}",
                g.data[i]
            );
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp, &w) - loss(&p, &xm, &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        check_grads(vec![5, 4], 3, 11);
        check_grads(vec![], 2, 12);
        check_grads(vec![3], 1, 13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn gradients_match_for_random_shapes(h1 in 1usize..6, h2 in 1usize..6, rows in 1usize..4, seed in 0u64..1000) {
            check_grads(vec![h1, h2], rows, seed);
        }
    }
}
