//! Neural building blocks: linear maps, an LSTM cell, the scaled residual
//! vision network, and positional encodings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform init in ±sqrt(1/fan_in); biases start at zero.
pub fn init_weight(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).with_grad()
}

// ── Linear ───────────────────────────────────────────────────────────

pub struct Linear {
    pub weight: Tensor, // [out × in]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            weight: init_weight(&[out_dim, in_dim], in_dim, rng),
            bias: Tensor::zeros(&[out_dim]).with_grad(),
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]).with_grad(),
            bias: Tensor::zeros(&[out_dim]).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// x·Wᵀ + b for x: [batch × in].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul_t(&self.weight)?.add_rows(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ── LSTM cell ────────────────────────────────────────────────────────

/// Fully connected LSTM cell. The four gate matrices act on [h_prev, x].
pub struct LstmCell {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_c: Tensor,
    pub w_o: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> LstmCell {
        let fan_in = hidden + input;
        let w = |rng: &mut _| init_weight(&[hidden, fan_in], fan_in, rng);
        LstmCell {
            w_f: w(rng),
            w_i: w(rng),
            w_c: w(rng),
            w_o: w(rng),
            b_f: Tensor::zeros(&[hidden]).with_grad(),
            b_i: Tensor::zeros(&[hidden]).with_grad(),
            b_c: Tensor::zeros(&[hidden]).with_grad(),
            b_o: Tensor::zeros(&[hidden]).with_grad(),
            hidden,
            input,
        }
    }

    /// One step over a batch: x [B×input], h/c [B×hidden] → (h', c').
    pub fn step(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = Tensor::concat(&[h_prev.clone(), x.clone()], 1)?;
        let gate = |w: &Tensor, b: &Tensor| -> Result<Tensor> {
            z.matmul_t(&w)?.add_rows(b)
        };
        let f = gate(&self.w_f, &self.b_f)?.sigmoid();
        let i = gate(&self.w_i, &self.b_i)?.sigmoid();
        let c_tilde = gate(&self.w_c, &self.b_c)?.tanh_act();
        let o = gate(&self.w_o, &self.b_o)?.sigmoid();
        let c = f.mul(c_prev)?.add(&i.mul(&c_tilde)?)?;
        let h = o.mul(&c.tanh_act())?;
        Ok((h, c))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

// ── Vision network ───────────────────────────────────────────────────

/// One residual sub-block: x + conv(relu(conv(relu(x)))). Convs are 3×3,
/// stride 1, padding 1, no bias, so zero weights give an exact identity.
struct ResSub {
    conv1: Tensor,
    conv2: Tensor,
}

impl ResSub {
    fn new(channels: usize, rng: &mut impl Rng) -> ResSub {
        let fan_in = channels * 9;
        ResSub {
            conv1: init_weight(&[channels, channels, 3, 3], fan_in, rng),
            conv2: init_weight(&[channels, channels, 3, 3], fan_in, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.relu().conv2d(&self.conv1, 1, 1)?.relu().conv2d(&self.conv2, 1, 1)?;
        x.add(&y)
    }
}

struct ConvBlock {
    conv: Tensor, // [out, in, 3, 3]
    res: [ResSub; 2],
}

/// Residual conv encoder: per block, conv → 2×2 max-pool → two residual
/// sub-blocks. Channel widths come from the caller; the block/residual
/// topology follows the IMPALA pattern at reduced size.
pub struct VisionNet {
    blocks: Vec<ConvBlock>,
    pub in_channels: usize,
}

impl VisionNet {
    pub fn new(in_channels: usize, widths: &[usize], rng: &mut impl Rng) -> VisionNet {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for &c_out in widths {
            blocks.push(ConvBlock {
                conv: init_weight(&[c_out, c_in, 3, 3], c_in * 9, rng),
                res: [ResSub::new(c_out, rng), ResSub::new(c_out, rng)],
            });
            c_in = c_out;
        }
        VisionNet { blocks, in_channels }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.shape()[0]).unwrap_or(self.in_channels)
    }

    /// Spatial shrink factor (2 per block from pooling).
    pub fn downscale(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let s = frames.shape();
        if s.len() != 3 || s[0] != self.in_channels {
            return Err(Error::shape(
                "vision_forward",
                format!("expected [{}, H, W], got {s:?}", self.in_channels),
            ));
        }
        let mut x = frames.clone();
        for block in &self.blocks {
            x = x.conv2d(&block.conv, 1, 1)?.max_pool2d(2)?;
            for sub in &block.res {
                x = sub.forward(&x)?;
            }
        }
        Ok(x)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.conv"), block.conv.clone()));
            for (j, sub) in block.res.iter().enumerate() {
                out.push((format!("{prefix}.block{i}.res{j}.conv1"), sub.conv1.clone()));
                out.push((format!("{prefix}.block{i}.res{j}.conv2"), sub.conv2.clone()));
            }
        }
    }
}

// ── Positional encodings ─────────────────────────────────────────────

/// Sinusoidal table: PE(pos, 2i) = sin(pos/10000^(2i/d)),
/// PE(pos, 2i+1) = cos(same argument). Pure function of its arguments.
pub fn sinusoidal_encoding(max_pos: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::shape(
            "sinusoidal_encoding",
            format!("d_model must be even, got {d_model}"),
        ));
    }
    let mut data = vec![0.0; max_pos * d_model];
    for pos in 0..max_pos {
        for i in 0..d_model / 2 {
            let arg = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = arg.sin();
            data[pos * d_model + 2 * i + 1] = arg.cos();
        }
    }
    Tensor::from_vec(data, &[max_pos, d_model])
}

/// Trainable positional encoding initialized from N(0, sigma²).
pub fn gaussian_encoding(shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::Contract(format!("gaussian_encoding requires sigma > 0, got {sigma}")));
    }
    Ok(Tensor::rand_normal(shape, 0.0, sigma, rng).with_grad())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_identity_and_zero() {
        let l = Linear::zeroed(3, 3);
        l.weight.set_data(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert_eq!(l.forward(&x).unwrap().to_vec(), vec![1.0, 2.0, 3.0]);

        let l = Linear::zeroed(3, 2);
        l.bias.set_data(vec![7.0, -2.0]);
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0, 1.0, 2.0, 3.0], &[2, 3]).unwrap();
        assert_eq!(l.forward(&x).unwrap().to_vec(), vec![7.0, -2.0, 7.0, -2.0]);
    }

    #[test]
    fn linear_gradient() {
        let mut r = rng(1);
        let l = Linear::new(4, 3, &mut r);
        let x = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut r).with_grad();
        let f = {
            let (w, b, x) = (l.weight.clone(), l.bias.clone(), x.clone());
            move || {
                let l = Linear { weight: w.clone(), bias: b.clone() };
                Ok(l.forward(&x)?.sum())
            }
        };
        check_grads(&[("w", &l.weight), ("b", &l.bias), ("x", &x)], &f, 1e-6, 1e-6).unwrap();
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let mut r = rng(2);
        let cell = LstmCell::new(3, 4, &mut r);
        for t in [&cell.w_f, &cell.w_i, &cell.w_c, &cell.w_o] {
            t.set_data(vec![0.0; t.numel()]);
        }
        let x = Tensor::ones(&[1, 3]);
        let h0 = Tensor::zeros(&[1, 4]);
        let c0 = Tensor::zeros(&[1, 4]);
        let (h, c) = cell.step(&x, &h0, &c0).unwrap();
        assert_eq!(h.to_vec(), vec![0.0; 4]);
        assert_eq!(c.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn lstm_saturated_forget_gate_retains_memory() {
        let mut r = rng(3);
        let cell = LstmCell::new(2, 3, &mut r);
        for t in [&cell.w_f, &cell.w_i, &cell.w_c, &cell.w_o] {
            t.set_data(vec![0.0; t.numel()]);
        }
        cell.b_f.set_data(vec![1000.0; 3]);
        let x = Tensor::ones(&[1, 2]);
        let h0 = Tensor::zeros(&[1, 3]);
        let c0 = Tensor::from_vec(vec![0.3, -0.7, 0.9], &[1, 3]).unwrap();
        let (_, c) = cell.step(&x, &h0, &c0).unwrap();
        for (a, b) in c.to_vec().iter().zip(c0.to_vec()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lstm_gradient_of_squared_output() {
        let mut r = rng(4);
        let cell = LstmCell::new(2, 3, &mut r);
        let x = Tensor::rand_uniform(&[1, 2], -1.0, 1.0, &mut r);
        let h0 = Tensor::rand_uniform(&[1, 3], -0.5, 0.5, &mut r);
        let c0 = Tensor::rand_uniform(&[1, 3], -0.5, 0.5, &mut r);
        let mut params = Vec::new();
        cell.collect_params("lstm", &mut params);
        let f = {
            let (x, h0, c0) = (x.clone(), h0.clone(), c0.clone());
            let p = params.clone();
            move || {
                let cell = LstmCell {
                    w_f: p[0].1.clone(),
                    w_i: p[1].1.clone(),
                    w_c: p[2].1.clone(),
                    w_o: p[3].1.clone(),
                    b_f: p[4].1.clone(),
                    b_i: p[5].1.clone(),
                    b_c: p[6].1.clone(),
                    b_o: p[7].1.clone(),
                    hidden: 3,
                    input: 2,
                };
                let (h, _) = cell.step(&x, &h0, &c0)?;
                Ok(h.mul(&h)?.sum())
            }
        };
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        check_grads(&refs, &f, 1e-6, 1e-5).unwrap();
    }

    #[test]
    fn lstm_hidden_state_bounded() {
        let mut r = rng(5);
        let cell = LstmCell::new(4, 6, &mut r);
        let mut h = Tensor::zeros(&[1, 6]);
        let mut c = Tensor::zeros(&[1, 6]);
        for _ in 0..50 {
            let x = Tensor::rand_uniform(&[1, 4], -5.0, 5.0, &mut r);
            let (nh, nc) = cell.step(&x, &h, &c).unwrap();
            for &v in nh.data().iter() {
                assert!(v > -1.0 && v < 1.0);
            }
            h = nh;
            c = nc;
        }
    }

    #[test]
    fn vision_zero_net_zero_output() {
        let mut r = rng(6);
        let net = VisionNet::new(1, &[4, 8], &mut r);
        let mut params = Vec::new();
        net.collect_params("v", &mut params);
        for (_, t) in &params {
            t.set_data(vec![0.0; t.numel()]);
        }
        let x = Tensor::zeros(&[1, 12, 12]);
        let y = net.forward(&x).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[8, 3, 3]);
    }

    #[test]
    fn residual_subblock_zeroed_is_identity() {
        let mut r = rng(7);
        let sub = ResSub::new(3, &mut r);
        sub.conv1.set_data(vec![0.0; sub.conv1.numel()]);
        sub.conv2.set_data(vec![0.0; sub.conv2.numel()]);
        let x = Tensor::rand_uniform(&[3, 5, 5], -1.0, 1.0, &mut r);
        let y = sub.forward(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn vision_gradient_two_blocks() {
        let mut r = rng(8);
        let net = VisionNet::new(1, &[2, 3], &mut r);
        let x = Tensor::rand_uniform(&[1, 12, 12], -1.0, 1.0, &mut r);
        let mut params = Vec::new();
        net.collect_params("v", &mut params);
        let f = {
            let x = x.clone();
            // rebuild references to the same underlying parameter tensors
            let net = VisionNet {
                blocks: net
                    .blocks
                    .iter()
                    .map(|b| ConvBlock {
                        conv: b.conv.clone(),
                        res: [
                            ResSub { conv1: b.res[0].conv1.clone(), conv2: b.res[0].conv2.clone() },
                            ResSub { conv1: b.res[1].conv1.clone(), conv2: b.res[1].conv2.clone() },
                        ],
                    })
                    .collect(),
                in_channels: 1,
            };
            move || Ok(net.forward(&x)?.sum())
        };
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        check_grads(&refs, &f, 1e-6, 1e-5).unwrap();
    }

    #[test]
    fn sinusoidal_row_zero_alternates() {
        let pe = sinusoidal_encoding(4, 6).unwrap();
        let row0 = &pe.to_vec()[..6];
        assert_eq!(row0, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sinusoidal_first_column_is_sin_pos() {
        let pe = sinusoidal_encoding(8, 4).unwrap();
        let v = pe.to_vec();
        for pos in 0..8 {
            assert!((v[pos * 4] - (pos as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn sinusoidal_rejects_odd_width() {
        assert!(sinusoidal_encoding(4, 5).is_err());
    }

    #[test]
    fn sinusoidal_adjacency_similarity() {
        // adjacent rows look more alike than rows 50 apart
        let pe = sinusoidal_encoding(110, 256).unwrap();
        let v = pe.to_vec();
        assert!(v.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        let cos_sim = |a: usize, b: usize| {
            let (ra, rb) = (&v[a * 256..(a + 1) * 256], &v[b * 256..(b + 1) * 256]);
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut adjacent = 0.0;
        let mut distant = 0.0;
        let mut count = 0;
        for pos in 0..60 {
            adjacent += cos_sim(pos, pos + 1);
            distant += cos_sim(pos, pos + 50);
            count += 1;
        }
        assert!(adjacent / count as f64 > distant / count as f64);
    }

    #[test]
    fn gaussian_encoding_behaviour() {
        let mut r = rng(9);
        let tiny = gaussian_encoding(&[10], 1e-12, &mut r).unwrap();
        assert!(tiny.to_vec().iter().all(|&v| v.abs() < 1e-10));

        let mut r = rng(10);
        let sigma = 0.5;
        let big = gaussian_encoding(&[100, 100], sigma, &mut r).unwrap();
        let mean: f64 = big.data().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 4.0 * sigma / 100.0);
        assert!(big.requires_grad());

        let mut r1 = rng(11);
        let mut r2 = rng(11);
        let a = gaussian_encoding(&[32], 1.0, &mut r1).unwrap();
        let b = gaussian_encoding(&[32], 1.0, &mut r2).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());

        assert!(gaussian_encoding(&[4], 0.0, &mut r1).is_err());
    }
}
