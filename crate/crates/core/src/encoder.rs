//! Gloss encoders: LSTM variants that compose a token sequence into one
//! vector, the tanh output projection, and the additive/multiplicative
//! unsupervised baselines.
//!
//! Gate weights are stored stacked, four blocks of `H` rows in the order
//! input, forget, output, candidate:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)      c' = f ⊙ c + i ⊙ g
//! f = σ(W_f x + U_f h + b_f)      h' = o ⊙ tanh(c')
//! o = σ(W_o x + U_o h + b_o)
//! g = tanh(W_g x + U_g h + b_g)
//! ```
//!
//! The state starts at zero and there are no peephole connections.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::PretrainedTable;
use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const DEFAULT_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderMode {
    /// Hidden state after the last true token.
    FinalState,
    /// Mean of the hidden states over true tokens.
    StateAverage,
    /// Forward final state concatenated with the final state of a second LSTM
    /// run over the reversed gloss.
    Bidirectional,
}

impl EncoderMode {
    pub fn output_width(self, hidden: usize) -> usize {
        match self {
            EncoderMode::Bidirectional => 2 * hidden,
            _ => hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `4H × E` input weights.
    pub w: Array2<f64>,
    /// `4H × H` recurrent weights.
    pub u: Array2<f64>,
    /// `4H` biases.
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * hidden, input)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn uniform(input: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || rng.gen_range(-scale..=scale);
        LstmParams {
            w: Array2::from_shape_simple_fn((4 * hidden, input), &mut draw),
            u: Array2::from_shape_simple_fn((4 * hidden, hidden), &mut draw),
            b: Array1::from_shape_simple_fn(4 * hidden, &mut draw),
        }
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 3] {
        [
            self.w.as_slice().expect("standard layout"),
            self.u.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.u.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.nrows() != 4 * h || self.w.nrows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Shape(format!(
                "LSTM blocks {}x{}, {}x{}, {} do not match hidden size {h}",
                self.w.nrows(),
                self.w.ncols(),
                self.u.nrows(),
                self.u.ncols(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

/// Everything one LSTM step needs to be differentiated.
#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    o: Array1<f64>,
    g: Array1<f64>,
    tanh_c: Array1<f64>,
    pub(crate) h: Array1<f64>,
    c: Array1<f64>,
}

fn step(
    p: &LstmParams,
    x: ArrayView1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
) -> StepCache {
    let hs = p.hidden();
    let z = p.w.dot(&x) + p.u.dot(h_prev) + &p.b;
    let i = z.slice(s![0..hs]).mapv(sigmoid);
    let f = z.slice(s![hs..2 * hs]).mapv(sigmoid);
    let o = z.slice(s![2 * hs..3 * hs]).mapv(sigmoid);
    let g = z.slice(s![3 * hs..4 * hs]).mapv(f64::tanh);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    StepCache {
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        o,
        g,
        tanh_c,
        h,
        c,
    }
}

/// One LSTM step, returning `(h_t, c_t)`.
pub fn lstm_step(
    params: &LstmParams,
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    params.check()?;
    let hs = params.hidden();
    if x.len() != params.input() || h_prev.len() != hs || c_prev.len() != hs {
        return Err(Error::Shape(format!(
            "step inputs x={}, h={}, c={} for an LSTM of {}→{hs}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            params.input()
        )));
    }
    let st = step(params, x, &h_prev.to_owned(), &c_prev.to_owned());
    Ok((st.h, st.c))
}

fn run(p: &LstmParams, xs: &[ArrayView1<f64>]) -> Vec<StepCache> {
    let hs = p.hidden();
    let mut h = Array1::zeros(hs);
    let mut c = Array1::zeros(hs);
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let st = step(p, *x, &h, &c);
        h = st.h.clone();
        c = st.c.clone();
        caches.push(st);
    }
    caches
}

/// Backpropagates through a cached run. `dh[t]` is the loss gradient reaching
/// `h_t` from outside the recurrence. Accumulates parameter gradients into
/// `grads` and returns the gradient for each input.
fn run_backward(
    p: &LstmParams,
    xs: &[ArrayView1<f64>],
    caches: &[StepCache],
    dh: &[Array1<f64>],
    grads: &mut LstmParams,
) -> Vec<Array1<f64>> {
    let hs = p.hidden();
    let mut dh_next: Array1<f64> = Array1::zeros(hs);
    let mut dc_next: Array1<f64> = Array1::zeros(hs);
    let mut dxs = vec![Array1::zeros(p.input()); xs.len()];
    let mut dz = Array1::zeros(4 * hs);
    for t in (0..caches.len()).rev() {
        let st = &caches[t];
        let dh_t = &dh[t] + &dh_next;
        let d_o = &dh_t * &st.tanh_c;
        let dc = &dc_next + &(&dh_t * &st.o * &st.tanh_c.mapv(|v| 1.0 - v * v));
        let di = &dc * &st.g;
        let dg = &dc * &st.i;
        let df = &dc * &st.c_prev;
        dc_next = &dc * &st.f;

        dz.slice_mut(s![0..hs])
            .assign(&(&di * &st.i.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![hs..2 * hs])
            .assign(&(&df * &st.f.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![2 * hs..3 * hs])
            .assign(&(&d_o * &st.o.mapv(|v| v * (1.0 - v))));
        dz.slice_mut(s![3 * hs..4 * hs])
            .assign(&(&dg * &st.g.mapv(|v| 1.0 - v * v)));

        let dz_col = dz.view().insert_axis(Axis(1));
        general_mat_mul(1.0, &dz_col, &xs[t].insert_axis(Axis(0)), 1.0, &mut grads.w);
        general_mat_mul(1.0, &dz_col, &st.h_prev.view().insert_axis(Axis(0)), 1.0, &mut grads.u);
        grads.b += &dz;

        dxs[t] = p.w.t().dot(&dz);
        dh_next = p.u.t().dot(&dz);
    }
    dxs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mode: EncoderMode,
    pub forward: LstmParams,
    /// Present exactly when the mode is bidirectional.
    pub backward: Option<LstmParams>,
}

/// Forward-pass record of one encoded sequence.
pub(crate) struct EncodeCache {
    forward: Vec<StepCache>,
    backward: Vec<StepCache>,
}

impl Encoder {
    pub fn new(mode: EncoderMode, input: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let forward = LstmParams::uniform(input, hidden, scale, rng);
        let backward = (mode == EncoderMode::Bidirectional)
            .then(|| LstmParams::uniform(input, hidden, scale, rng));
        Encoder {
            mode,
            forward,
            backward,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (e, h) = (self.forward.input(), self.forward.hidden());
        Encoder {
            mode: self.mode,
            forward: LstmParams::zeros(e, h),
            backward: self.backward.as_ref().map(|_| LstmParams::zeros(e, h)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn input(&self) -> usize {
        self.forward.input()
    }

    pub fn output_width(&self) -> usize {
        self.mode.output_width(self.hidden())
    }

    fn validate(&self) -> Result<()> {
        self.forward.check()?;
        match (self.mode, &self.backward) {
            (EncoderMode::Bidirectional, Some(b)) => {
                b.check()?;
                if b.hidden() != self.hidden() || b.input() != self.input() {
                    return Err(Error::Shape("backward LSTM differs from forward".into()));
                }
                Ok(())
            }
            (EncoderMode::Bidirectional, None) => {
                Err(Error::Shape("bidirectional encoder without a backward LSTM".into()))
            }
            (_, Some(_)) => Err(Error::Shape("unidirectional encoder with a backward LSTM".into())),
            (_, None) => Ok(()),
        }
    }

    /// Encodes the rows of `embedded` where `mask` is true. Masked-out rows
    /// (padding) never enter the recurrence.
    pub fn encode(&self, embedded: ArrayView2<f64>, mask: &[bool]) -> Result<Array1<f64>> {
        if mask.len() != embedded.nrows() {
            return Err(Error::Shape(format!(
                "mask of {} for {} positions",
                mask.len(),
                embedded.nrows()
            )));
        }
        let xs: Vec<ArrayView1<f64>> = embedded
            .outer_iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(x, _)| x)
            .collect();
        Ok(self.encode_sequence(&xs)?.0)
    }

    pub(crate) fn encode_sequence(&self, xs: &[ArrayView1<f64>]) -> Result<(Array1<f64>, EncodeCache)> {
        self.validate()?;
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != self.input()) {
            return Err(Error::Shape(format!(
                "token vector of {} for encoder input {}",
                bad.len(),
                self.input()
            )));
        }
        let forward = run(&self.forward, xs);
        let n = forward.len();
        let (out, backward) = match self.mode {
            EncoderMode::FinalState => (forward[n - 1].h.clone(), Vec::new()),
            EncoderMode::StateAverage => {
                let mut sum = Array1::zeros(self.hidden());
                for st in &forward {
                    sum += &st.h;
                }
                (sum / n as f64, Vec::new())
            }
            EncoderMode::Bidirectional => {
                let reversed: Vec<ArrayView1<f64>> = xs.iter().rev().copied().collect();
                let back = run(self.backward.as_ref().expect("validated"), &reversed);
                let mut out = Array1::zeros(2 * self.hidden());
                out.slice_mut(s![..self.hidden()]).assign(&forward[n - 1].h);
                out.slice_mut(s![self.hidden()..]).assign(&back[n - 1].h);
                (out, back)
            }
        };
        Ok((out, EncodeCache { forward, backward }))
    }

    /// Gradient of the encoding with respect to parameters (accumulated into
    /// `grads`) and inputs (returned, one per position of `xs`).
    pub(crate) fn backward(
        &self,
        xs: &[ArrayView1<f64>],
        cache: &EncodeCache,
        d_out: ArrayView1<f64>,
        grads: &mut Encoder,
    ) -> Vec<Array1<f64>> {
        let n = xs.len();
        let hs = self.hidden();
        let mut dh = vec![Array1::zeros(hs); n];
        match self.mode {
            EncoderMode::FinalState => {
                dh[n - 1].assign(&d_out);
                run_backward(&self.forward, xs, &cache.forward, &dh, &mut grads.forward)
            }
            EncoderMode::StateAverage => {
                let share = d_out.mapv(|v| v / n as f64);
                for d in &mut dh {
                    d.assign(&share);
                }
                run_backward(&self.forward, xs, &cache.forward, &dh, &mut grads.forward)
            }
            EncoderMode::Bidirectional => {
                dh[n - 1].assign(&d_out.slice(s![..hs]));
                let mut dxs = run_backward(&self.forward, xs, &cache.forward, &dh, &mut grads.forward);
                let mut dh_back = vec![Array1::zeros(hs); n];
                dh_back[n - 1].assign(&d_out.slice(s![hs..]));
                let reversed: Vec<ArrayView1<f64>> = xs.iter().rev().copied().collect();
                let dxs_back = run_backward(
                    self.backward.as_ref().expect("validated"),
                    &reversed,
                    &cache.backward,
                    &dh_back,
                    grads.backward.as_mut().expect("gradient mirrors encoder"),
                );
                for (t, d) in dxs_back.into_iter().enumerate() {
                    dxs[n - 1 - t] += &d;
                }
                dxs
            }
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.forward.tensors().into();
        if let Some(b) = &self.backward {
            out.extend(b.tensors());
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.forward.tensors_mut().into();
        if let Some(b) = &mut self.backward {
            out.extend(b.tensors_mut());
        }
        out
    }
}

/// `y = tanh(M v + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `D × width`.
    pub m: Array2<f64>,
    pub b: Array1<f64>,
}

impl Projection {
    pub fn zeros(input: usize, output: usize) -> Self {
        Projection {
            m: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn uniform(input: usize, output: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || rng.gen_range(-scale..=scale);
        Projection {
            m: Array2::from_shape_simple_fn((output, input), &mut draw),
            b: Array1::from_shape_simple_fn(output, &mut draw),
        }
    }

    pub fn input(&self) -> usize {
        self.m.ncols()
    }

    pub fn output(&self) -> usize {
        self.m.nrows()
    }

    pub fn project(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.input() {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {}",
                self.input(),
                v.len()
            )));
        }
        Ok((self.m.dot(&v) + &self.b).mapv(f64::tanh))
    }

    /// Backward through the projection given its output `y` and `dy`;
    /// returns the gradient for the input `v`.
    pub(crate) fn backward(
        &self,
        v: ArrayView1<f64>,
        y: ArrayView1<f64>,
        dy: ArrayView1<f64>,
        grads: &mut Projection,
    ) -> Array1<f64> {
        let dpre = &dy * &y.mapv(|t| 1.0 - t * t);
        general_mat_mul(
            1.0,
            &dpre.view().insert_axis(Axis(1)),
            &v.insert_axis(Axis(0)),
            1.0,
            &mut grads.m,
        );
        grads.b += &dpre;
        self.m.t().dot(&dpre)
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 2] {
        [
            self.m.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.m.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn known_vectors<'a, S: AsRef<str>>(
    table: &'a PretrainedTable,
    gloss: &[S],
) -> Result<Vec<ArrayView1<'a, f64>>> {
    let found: Vec<_> = gloss.iter().filter_map(|w| table.lookup(w.as_ref())).collect();
    if found.is_empty() {
        return Err(Error::NoKnownWords);
    }
    Ok(found)
}

/// Elementwise sum of the pretrained vectors of the gloss words; unknown
/// words are skipped.
pub fn w2v_add<S: AsRef<str>>(table: &PretrainedTable, gloss: &[S]) -> Result<Array1<f64>> {
    let vs = known_vectors(table, gloss)?;
    let mut acc = vs[0].to_owned();
    for v in &vs[1..] {
        acc += v;
    }
    Ok(acc)
}

/// Elementwise product of the pretrained vectors of the gloss words.
pub fn w2v_mult<S: AsRef<str>>(table: &PretrainedTable, gloss: &[S]) -> Result<Array1<f64>> {
    let vs = known_vectors(table, gloss)?;
    let mut acc = vs[0].to_owned();
    for v in &vs[1..] {
        acc *= v;
    }
    Ok(acc)
}
