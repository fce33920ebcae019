use ndarray::{s, Array2, ArrayView2, Axis};

use super::{ToyModel, END_TOKEN};
use crate::error::{Result, VceError};
use crate::perturbation::ImageTensor;

/// Everything one forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Text tokens that followed the visual tokens.
    pub tokens: Vec<u32>,
    pub n_visual: usize,
    /// Post-block residual stream per layer, each `seq x D`.
    pub hidden: Vec<Array2<f32>>,
    /// Next-token logits per position, `seq x V`.
    pub logits: Array2<f32>,
    /// Floating-point operations executed by the pass.
    pub op_count: u64,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.n_visual + self.tokens.len()
    }
}

/// Teacher-forced view of a response: rows are the positions that predict
/// each response token, so row `i` holds the logits and hidden states that
/// produced `response[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTrace {
    pub response: Vec<u32>,
    /// `N x V`
    pub logits: Array2<f32>,
    /// One `N x D` matrix per layer.
    pub hidden: Vec<Array2<f32>>,
}

impl ResponseTrace {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Logit assigned to `response[i]` at its predicting position.
    pub fn token_logits(&self) -> Vec<f32> {
        self.response
            .iter()
            .enumerate()
            .map(|(i, &t)| self.logits[[i, t as usize]])
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Applies the nonlinearity used by every MLP hidden layer.
pub(crate) fn gelu_vec(xs: &mut Array2<f32>) {
    xs.mapv_inplace(gelu);
}

fn matmul(a: &ArrayView2<f32>, b: &ArrayView2<f32>, ops: &mut u64) -> Array2<f32> {
    *ops += 2 * (a.nrows() * a.ncols() * b.ncols()) as u64;
    a.dot(b)
}

/// Row-wise causal softmax in place; entries above the diagonal become 0.
fn causal_softmax(scores: &mut Array2<f32>) {
    for (j, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let max = row
            .slice(s![..=j])
            .iter()
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for (i, v) in row.iter_mut().enumerate() {
            if i <= j {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl ToyModel {
    /// Splits the image into row-major patches; within a patch the order is
    /// channel, then row, then column.
    fn patches(&self, image: &ImageTensor) -> Result<Array2<f32>> {
        let c = &self.config;
        if image.channels() != c.image_channels
            || image.height() != c.image_height
            || image.width() != c.image_width
        {
            return Err(VceError::Shape(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                image.channels(),
                image.height(),
                image.width(),
                c.image_channels,
                c.image_height,
                c.image_width
            )));
        }
        let p = c.patch_size;
        let grid_w = c.image_width / p;
        let vals = image.values();
        Ok(Array2::from_shape_fn(
            (c.n_visual, c.patch_pixels()),
            |(patch, k)| {
                let (py, px) = (patch / grid_w, patch % grid_w);
                let ch = k / (p * p);
                let (dy, dx) = ((k % (p * p)) / p, k % p);
                let y = py * p + dy;
                let x = px * p + dx;
                vals[(ch * c.image_height + y) * c.image_width + x]
            },
        ))
    }

    fn embed(&self, tokens: &[u32], image: &ImageTensor, ops: &mut u64) -> Result<Array2<f32>> {
        let c = &self.config;
        let seq = c.n_visual + tokens.len();
        if seq > c.max_seq_len {
            return Err(VceError::LengthOverflow {
                len: seq,
                max: c.max_seq_len,
            });
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(VceError::Config(format!(
                "token id {t} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        let patches = self.patches(image)?;
        let mut x = Array2::zeros((seq, c.d_model));
        x.slice_mut(s![..c.n_visual, ..])
            .assign(&matmul(&patches.view(), &self.patch_embed.view(), ops));
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(c.n_visual + i)
                .assign(&self.tok_embed.row(t as usize));
        }
        Ok(x)
    }

    /// Runs the visual tokens followed by `tokens` through every block.
    pub fn forward(&self, tokens: &[u32], image: &ImageTensor) -> Result<ForwardTrace> {
        let mut ops = 0u64;
        let mut x = self.embed(tokens, image, &mut ops)?;
        let scale = 1.0 / (self.config.d_model as f32).sqrt();
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let q = matmul(&x.view(), &b.wq.view(), &mut ops);
            let k = matmul(&x.view(), &b.wk.view(), &mut ops);
            let v = matmul(&x.view(), &b.wv.view(), &mut ops);
            let mut scores = matmul(&q.view(), &k.t(), &mut ops);
            scores *= scale;
            causal_softmax(&mut scores);
            let mixed = matmul(&scores.view(), &v.view(), &mut ops);
            x += &matmul(&mixed.view(), &b.wo.view(), &mut ops);

            let mut act = matmul(&x.view(), &b.w1.view(), &mut ops);
            gelu_vec(&mut act);
            x += &matmul(&act.view(), &b.w2.view(), &mut ops);
            hidden.push(x.clone());
        }
        let logits = matmul(&x.view(), &self.unembed.view(), &mut ops);
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            n_visual: self.config.n_visual,
            hidden,
            logits,
            op_count: ops,
        })
    }

    /// Greedy decoding; the end token is included when emitted.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        image: &ImageTensor,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let needed = self.config.n_visual + prompt.len() + max_new.saturating_sub(1);
        if max_new > 0 && needed > self.config.max_seq_len {
            return Err(VceError::LengthOverflow {
                len: needed,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new {
            let trace = self.forward(&tokens, image)?;
            let last = trace.logits.row(trace.seq_len() - 1);
            let next = argmax(last.as_slice().expect("logits rows are contiguous"));
            out.push(next);
            tokens.push(next);
            if next == END_TOKEN {
                break;
            }
        }
        Ok(out)
    }

    /// Scores `response` after `prompt` in one pass.
    pub fn teacher_forced_trace(
        &self,
        prompt: &[u32],
        response: &[u32],
        image: &ImageTensor,
    ) -> Result<ResponseTrace> {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(response);
        let trace = self.forward(&tokens, image)?;
        let first = self.config.n_visual + prompt.len() - 1;
        let rows = s![first..first + response.len(), ..];
        Ok(ResponseTrace {
            response: response.to_vec(),
            logits: trace.logits.slice(rows).to_owned(),
            hidden: trace.hidden.iter().map(|h| h.slice(rows).to_owned()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;
    use crate::toy_lvlm::{init_model, ToyModelConfig};

    fn noise_image(seed: u64) -> ImageTensor {
        let mut g = GaussianStream::new(seed);
        ImageTensor::new(1, 16, 16, g.normals(256).iter().map(|&v| v as f32).collect()).unwrap()
    }

    fn model() -> ToyModel {
        init_model(ToyModelConfig {
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = model();
        let img = noise_image(1);
        let a = m.forward(&[5, 6, 7], &img).unwrap();
        let b = m.forward(&[5, 6, 7], &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hidden.len(), 8);
        assert!(a.hidden.iter().all(|h| h.dim() == (19, 32)));
        assert_eq!(a.logits.dim(), (19, 64));
    }

    #[test]
    fn softmax_rows_normalize() {
        let m = model();
        let t = m.forward(&[1, 2, 3, 4], &noise_image(2)).unwrap();
        for row in t.logits.rows() {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let total: f64 = row.iter().map(|&v| (v as f64 - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_positions() {
        let m = model();
        let img = noise_image(4);
        let base = m.forward(&[3, 9, 12, 40, 41], &img).unwrap();
        for (pos, tok) in [(2usize, 50u32), (3, 1), (4, 63)] {
            let mut toks = vec![3, 9, 12, 40, 41];
            toks[pos] = tok;
            let other = m.forward(&toks, &img).unwrap();
            let cut = 16 + pos; // first affected sequence position
            for (h0, h1) in base.hidden.iter().zip(&other.hidden) {
                assert_eq!(h0.slice(s![..cut, ..]), h1.slice(s![..cut, ..]));
            }
            assert_eq!(
                base.logits.slice(s![..cut, ..]),
                other.logits.slice(s![..cut, ..])
            );
        }
    }

    #[test]
    fn length_overflow_is_an_error() {
        let m = model();
        let img = noise_image(0);
        let long = vec![1u32; 49];
        assert!(matches!(
            m.forward(&long, &img),
            Err(VceError::LengthOverflow { len: 65, max: 64 })
        ));
        assert!(m.generate_greedy(&[1; 40], &img, 10).is_err());
        assert!(m.generate_greedy(&[1; 40], &img, 0).unwrap().is_empty());
    }

    #[test]
    fn greedy_matches_stepwise_argmax() {
        let m = model();
        let img = noise_image(5);
        let prompt = [62, 63];
        let out = m.generate_greedy(&prompt, &img, 16).unwrap();
        assert!(!out.is_empty());
        assert_eq!(out, m.generate_greedy(&prompt, &img, 16).unwrap());
        let mut toks = prompt.to_vec();
        for &t in &out {
            let tr = m.forward(&toks, &img).unwrap();
            let row = tr.logits.row(tr.seq_len() - 1).to_vec();
            assert_eq!(argmax(&row), t);
            toks.push(t);
        }
    }

    #[test]
    fn teacher_forcing_greedy_output_reports_row_maxima() {
        let m = model();
        let img = noise_image(6);
        let prompt = [62, 63];
        let out = m.generate_greedy(&prompt, &img, 12).unwrap();
        let tr = m.teacher_forced_trace(&prompt, &out, &img).unwrap();
        assert_eq!(tr.logits.nrows(), out.len());
        for (i, l) in tr.token_logits().iter().enumerate() {
            let max = tr.logits.row(i).iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            assert!(*l >= max - 1e-5, "row {i}: {l} < {max}");
        }
        assert!(tr.hidden.iter().all(|h| h.dim() == (out.len(), 32)));
    }

    #[test]
    fn empty_response_trace() {
        let m = model();
        let tr = m.teacher_forced_trace(&[62], &[], &noise_image(0)).unwrap();
        assert!(tr.is_empty());
        assert_eq!(tr.logits.dim(), (0, 64));
        assert!(tr.hidden.iter().all(|h| h.dim() == (0, 32)));
    }

    #[test]
    fn op_count_depends_only_on_shapes() {
        let m = model();
        let mut other = model();
        other.blocks[5].w2.fill(0.0);
        let a = m.forward(&[1, 2], &noise_image(0)).unwrap();
        let b = other.forward(&[1, 2], &noise_image(9)).unwrap();
        assert_eq!(a.op_count, b.op_count);
        let c = m.forward(&[1, 2, 3], &noise_image(0)).unwrap();
        assert!(c.op_count > a.op_count);
    }
}
