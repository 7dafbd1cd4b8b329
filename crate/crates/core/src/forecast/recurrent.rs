use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::train::Windows;
use crate::math::{sigmoid, sqrt};
use crate::rng::SimRng;

/// Stacked LSTM layers with ReLU cell and candidate activations, followed by a
/// dense layer on the last hidden state.
///
/// Per layer the parameters are `Wx` (`4h × n_in`), `Wh` (`4h × h`) and `b`
/// (`4h`), gate rows ordered input, forget, candidate, output. The dense `V`
/// (`outputs × h_last`) and bias follow the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrent {
    channels: usize,
    steps: usize,
    sizes: Vec<usize>,
    outputs: usize,
    dropout: f64,
}

struct LayerCache {
    /// Inputs seen by the layer, `steps × n_in`.
    xs: Vec<f64>,
    /// Hidden states, `(steps + 1) × h`, row 0 is the zero state.
    hs: Vec<f64>,
    cs: Vec<f64>,
    /// Gate activations, `steps × 4h`.
    gates: Vec<f64>,
    /// Dropout mask on the layer output: every step for inner layers, the
    /// final step only for the top layer.
    mask: Option<Vec<f64>>,
}

impl Recurrent {
    pub fn new(channels: usize, steps: usize, sizes: &[usize], outputs: usize, dropout: f64) -> Self {
        Self {
            channels,
            steps,
            sizes: sizes.to_vec(),
            outputs,
            dropout,
        }
    }

    pub fn arch_tag(&self) -> String {
        let hidden: Vec<String> = self.sizes.iter().map(|h| format!("{h}")).collect();
        format!(
            "recurrent/ch{}/t{}/h{}/out{}",
            self.channels,
            self.steps,
            hidden.join("x"),
            self.outputs
        )
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.channels
        } else {
            self.sizes[l - 1]
        }
    }

    fn layer_params(&self, l: usize) -> usize {
        let h = self.sizes[l];
        4 * h * (self.layer_input(l) + h + 1)
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.layer_params(k)).sum()
    }

    fn dense_offset(&self) -> usize {
        self.layer_offset(self.sizes.len())
    }

    fn top(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn n_params(&self) -> usize {
        self.dense_offset() + self.outputs * (self.top() + 1)
    }

    pub fn init_params(&self, rng: &mut SimRng) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        let mut uniform = |p: &mut Vec<f64>, count: usize, fan_in: usize, fan_out: usize| {
            let a = sqrt(6.0 / (fan_in + fan_out) as f64);
            p.extend((0..count).map(|_| rng.gen_range(-a..a)));
        };
        for l in 0..self.sizes.len() {
            let (n_in, h) = (self.layer_input(l), self.sizes[l]);
            uniform(&mut p, 4 * h * n_in, n_in, h);
            uniform(&mut p, 4 * h * h, h, h);
            p.extend((0..4 * h).map(|r| if r / h == 1 { 1.0 } else { 0.0 }));
        }
        uniform(&mut p, self.outputs * self.top(), self.top(), self.outputs);
        p.extend(core::iter::repeat(0.0).take(self.outputs));
        p
    }

    fn draw_mask(&self, len: usize, rng: &mut SimRng) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.dropout);
        (0..len)
            .map(|_| if rng.gen::<f64>() < self.dropout { 0.0 } else { keep })
            .collect()
    }

    fn forward(&self, params: &[f64], input: &[f64], mut rng: Option<&mut SimRng>) -> (Vec<LayerCache>, Vec<f64>, Vec<f64>) {
        let n_layers = self.sizes.len();
        let t_len = self.steps;
        let mut caches: Vec<LayerCache> = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (n_in, h) = (self.layer_input(l), self.sizes[l]);
            let xs = match caches.last() {
                None => input.to_vec(),
                Some(prev) => {
                    let ph = self.sizes[l - 1];
                    let mut xs = prev.hs[ph..].to_vec();
                    if let Some(m) = &prev.mask {
                        xs.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
                    }
                    xs
                }
            };
            let off = self.layer_offset(l);
            let wx = &params[off..off + 4 * h * n_in];
            let wh = &params[off + 4 * h * n_in..off + 4 * h * (n_in + h)];
            let b = &params[off + 4 * h * (n_in + h)..off + self.layer_params(l)];
            let mut hs = vec![0.0; (t_len + 1) * h];
            let mut cs = vec![0.0; (t_len + 1) * h];
            let mut gates = vec![0.0; t_len * 4 * h];
            for t in 0..t_len {
                let x = &xs[t * n_in..(t + 1) * n_in];
                let z = &mut gates[t * 4 * h..(t + 1) * 4 * h];
                for (r, zr) in z.iter_mut().enumerate() {
                    let hprev = &hs[t * h..(t + 1) * h];
                    let dot_x: f64 = wx[r * n_in..(r + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum();
                    let dot_h: f64 = wh[r * h..(r + 1) * h].iter().zip(hprev).map(|(w, v)| w * v).sum();
                    let pre = b[r] + dot_x + dot_h;
                    *zr = if r / h == 2 { pre.max(0.0) } else { sigmoid(pre) };
                }
                for k in 0..h {
                    let (i, f, g, o) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
                    let c = f * cs[t * h + k] + i * g;
                    cs[(t + 1) * h + k] = c;
                    hs[(t + 1) * h + k] = o * c.max(0.0);
                }
            }
            let dropped = self.dropout > 0.0 && l + 2 >= n_layers;
            let mask = match rng.as_deref_mut() {
                Some(r) if dropped => {
                    let len = if l + 1 == n_layers { h } else { t_len * h };
                    Some(self.draw_mask(len, r))
                }
                _ => None,
            };
            caches.push(LayerCache { xs, hs, cs, gates, mask });
        }
        let top = self.top();
        let last = caches.last().expect("at least one layer");
        let mut h_out = last.hs[t_len * top..].to_vec();
        if let Some(m) = &last.mask {
            h_out.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
        }
        let d = self.dense_offset();
        let v = &params[d..d + self.outputs * top];
        let c = &params[d + self.outputs * top..];
        let y = (0..self.outputs)
            .map(|o| c[o] + v[o * top..(o + 1) * top].iter().zip(&h_out).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        (caches, h_out, y)
    }

    pub fn predict(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        self.forward(params, input, None).2
    }

    pub fn loss_grad(
        &self,
        params: &[f64],
        windows: &Windows,
        batch: &[usize],
        mut dropout: Option<&mut SimRng>,
        grad: &mut [f64],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / (batch.len() * self.outputs) as f64;
        let mut loss = 0.0;
        for &i in batch {
            let (caches, h_out, y) = self.forward(params, windows.input(i), dropout.as_deref_mut());
            let dy: Vec<f64> = y
                .iter()
                .zip(windows.target(i))
                .map(|(&yo, &to)| {
                    let e = yo - to;
                    loss += e * e;
                    2.0 * e * scale
                })
                .collect();
            self.backward(params, &caches, &h_out, &dy, grad);
        }
        loss * scale
    }

    fn backward(&self, params: &[f64], caches: &[LayerCache], h_out: &[f64], dy: &[f64], grad: &mut [f64]) {
        let t_len = self.steps;
        let top = self.top();
        let d = self.dense_offset();
        let mut dh_top = vec![0.0; top];
        for (o, &g) in dy.iter().enumerate() {
            for k in 0..top {
                grad[d + o * top + k] += g * h_out[k];
                dh_top[k] += g * params[d + o * top + k];
            }
            grad[d + self.outputs * top + o] += g;
        }
        let n_layers = self.sizes.len();
        if let Some(m) = &caches[n_layers - 1].mask {
            dh_top.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
        }
        // Upstream gradient on each step's hidden output, `steps × h`.
        let mut dh_seq = vec![0.0; t_len * top];
        dh_seq[(t_len - 1) * top..].copy_from_slice(&dh_top);

        for l in (0..n_layers).rev() {
            let cache = &caches[l];
            let (n_in, h) = (self.layer_input(l), self.sizes[l]);
            let off = self.layer_offset(l);
            let (ox, oh, ob) = (off, off + 4 * h * n_in, off + 4 * h * (n_in + h));
            let need_dx = l > 0;
            let mut dx_seq = if need_dx { vec![0.0; t_len * n_in] } else { Vec::new() };
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            let mut dz = vec![0.0; 4 * h];
            for t in (0..t_len).rev() {
                let z = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
                for k in 0..h {
                    let (i, f, g, o) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
                    let c = cache.cs[(t + 1) * h + k];
                    let c_prev = cache.cs[t * h + k];
                    let dh = dh_seq[t * h + k] + dh_next[k];
                    let dc = if c > 0.0 { dh * o } else { 0.0 } + dc_next[k];
                    dz[k] = dc * g * i * (1.0 - i);
                    dz[h + k] = dc * c_prev * f * (1.0 - f);
                    dz[2 * h + k] = if g > 0.0 { dc * i } else { 0.0 };
                    dz[3 * h + k] = dh * c.max(0.0) * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                let x = &cache.xs[t * n_in..(t + 1) * n_in];
                let h_prev = &cache.hs[t * h..(t + 1) * h];
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                for (r, &g) in dz.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad[ob + r] += g;
                    let gx = &mut grad[ox + r * n_in..ox + (r + 1) * n_in];
                    gx.iter_mut().zip(x).for_each(|(a, &v)| *a += g * v);
                    let gh = &mut grad[oh + r * h..oh + (r + 1) * h];
                    gh.iter_mut().zip(h_prev).for_each(|(a, &v)| *a += g * v);
                    let wh = &params[oh + r * h..oh + (r + 1) * h];
                    dh_next.iter_mut().zip(wh).for_each(|(a, &w)| *a += g * w);
                    if need_dx {
                        let wx = &params[ox + r * n_in..ox + (r + 1) * n_in];
                        let dx = &mut dx_seq[t * n_in..(t + 1) * n_in];
                        dx.iter_mut().zip(wx).for_each(|(a, &w)| *a += g * w);
                    }
                }
            }
            if need_dx {
                if let Some(m) = &caches[l - 1].mask {
                    dx_seq.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
                }
                dh_seq = dx_seq;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy() -> (Recurrent, Windows, Vec<f64>) {
        let m = Recurrent::new(2, 4, &[3, 2], 2, 0.3);
        let series: Vec<f64> = (0..24).map(|k| 0.5 + 0.4 * libm::sin(0.7 * k as f64)).collect();
        let w = Windows::from_flat(&series, 4, 2, 2).unwrap();
        let params = m.init_params(&mut seeded(3));
        (m, w, params)
    }

    fn check_gradient(with_dropout: bool) {
        let (m, w, params) = toy();
        let batch: Vec<usize> = (0..w.len()).collect();
        let eval = |p: &[f64], g: &mut [f64]| {
            let mut r = seeded(11);
            m.loss_grad(p, &w, &batch, with_dropout.then_some(&mut r), g)
        };
        let mut grad = vec![0.0; m.n_params()];
        eval(&params, &mut grad);
        let mut scratch = vec![0.0; m.n_params()];
        let mut worst = 0.0f64;
        for k in 0..params.len() {
            let h = 1e-6;
            let mut p = params.clone();
            p[k] += h;
            let up = eval(&p, &mut scratch);
            p[k] -= 2.0 * h;
            let down = eval(&p, &mut scratch);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - grad[k]).abs() / (1e-4 + fd.abs().max(grad[k].abs())));
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        check_gradient(false);
    }

    #[test]
    fn gradient_matches_finite_differences_with_dropout() {
        check_gradient(true);
    }

    #[test]
    fn parameter_count_and_forget_bias() {
        let m = Recurrent::new(1, 96, &[16, 16], 1, 0.2);
        assert_eq!(m.n_params(), 4 * 16 * (1 + 16 + 1) + 4 * 16 * (16 + 16 + 1) + 17);
        let p = m.init_params(&mut seeded(0));
        let b0 = 4 * 16 * 17;
        assert!(p[b0..b0 + 16].iter().all(|&v| v == 0.0));
        assert!(p[b0 + 16..b0 + 32].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inference_is_deterministic() {
        let (m, w, params) = toy();
        assert_eq!(m.predict(&params, w.input(0)), m.predict(&params, w.input(0)));
    }
}
