use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::train::Windows;

/// `y = W x + b`. Parameters are `W` row-major (`outputs × inputs`), then `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearAr {
    inputs: usize,
    outputs: usize,
}

impl LinearAr {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs }
    }

    pub fn arch_tag(&self) -> String {
        format!("linear-ar/in{}/out{}", self.inputs, self.outputs)
    }

    pub fn n_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    pub fn init_params(&self) -> Vec<f64> {
        vec![0.0; self.n_params()]
    }

    pub fn predict(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let (w, b) = params.split_at(self.outputs * self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    pub fn loss_grad(&self, params: &[f64], windows: &Windows, batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / (batch.len() * self.outputs) as f64;
        let split = self.outputs * self.inputs;
        let mut loss = 0.0;
        for &i in batch {
            let x = windows.input(i);
            let y = self.predict(params, x);
            for (o, (&yo, &to)) in y.iter().zip(windows.target(i)).enumerate() {
                let err = yo - to;
                loss += err * err;
                let d = 2.0 * err * scale;
                grad[split + o] += d;
                let row = &mut grad[o * self.inputs..(o + 1) * self.inputs];
                for (g, &xv) in row.iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
        loss * scale
    }
}
