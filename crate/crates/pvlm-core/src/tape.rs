//! Reverse-mode automatic differentiation over an operation record.
//!
//! A `Tape` records every primitive applied through it. Nodes are appended in
//! execution order, so walking the record backwards visits operations in
//! reverse topological order exactly once. Each recorded node carries a
//! closure mapping the output adjoint to the adjoints of its parents.
//!
//! A tape is single-threaded; tensors themselves are immutable and may be
//! shared freely across tapes on different threads.

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Sums a full-shape adjoint down to the shape of a broadcast operand.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    if shape.iter().product::<usize>() == 1 {
        return Tensor::scalar(grad.sum()).reshape(shape);
    }
    // row vector [n] broadcast over [m, n]
    if let ([_, n], [rn]) = (grad.shape(), shape) {
        if n == rn {
            return grad.sum_rows();
        }
    }
    Err(TensorError::ShapeMismatch {
        op: "reduce_to",
        lhs: grad.shape().to_vec(),
        rhs: shape.to_vec(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves have no backward rule; their
    /// adjoints are what `grad`/`vjp` report.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Var {
        self.push(value, vec![a.0, b.0], Some(Box::new(backward)))
    }

    fn unary(
        &mut self,
        a: Var,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Var {
        self.push(value, vec![a.0], Some(Box::new(backward)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.add(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.binary(a, b, out, move |g| {
            vec![
                reduce_to(g, &sa).expect("add backward"),
                reduce_to(g, &sb).expect("add backward"),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.sub(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.binary(a, b, out, move |g| {
            vec![
                reduce_to(g, &sa).expect("sub backward"),
                reduce_to(&g.scale(-1.0), &sb).expect("sub backward"),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.mul(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.binary(a, b, out, move |g| {
            let ga = g.mul(&vb).expect("mul backward");
            let gb = g.mul(&va).expect("mul backward");
            vec![
                reduce_to(&ga, &sa).expect("mul backward"),
                reduce_to(&gb, &sb).expect("mul backward"),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.div(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.binary(a, b, out, move |g| {
            let ga = g.div(&vb).expect("div backward");
            let gb = g
                .mul(&va)
                .and_then(|t| t.div(&vb))
                .and_then(|t| t.div(&vb))
                .expect("div backward")
                .scale(-1.0);
            vec![
                reduce_to(&ga, &sa).expect("div backward"),
                reduce_to(&gb, &sb).expect("div backward"),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.unary(a, out, move |g| vec![g.scale(c)])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).add_scalar(c);
        self.unary(a, out, |g| vec![g.clone()])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).exp()?;
        let y = out.clone();
        Ok(self.unary(a, out, move |g| vec![g.mul(&y).expect("exp backward")]))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).clone();
        let out = x.ln()?;
        Ok(self.unary(a, out, move |g| vec![g.div(&x).expect("ln backward")]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).tanh();
        let y = out.clone();
        self.unary(a, out, move |g| {
            vec![g.mul(&y.map(|t| 1.0 - t * t)).expect("tanh backward")]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let y = out.clone();
        self.unary(a, out, move |g| {
            vec![g.mul(&y.map(|s| s * (1.0 - s))).expect("sigmoid backward")]
        })
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = x.log_sigmoid();
        self.unary(a, out, move |g| {
            vec![g
                .mul(&x.map(|v| crate::tensor::sigmoid(-v)))
                .expect("log_sigmoid backward")]
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let out = x.gelu();
        self.unary(a, out, move |g| {
            vec![g
                .mul(&x.map(crate::tensor::gelu_grad))
                .expect("gelu backward")]
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.matmul(&vb)?;
        Ok(self.binary(a, b, out, move |g| {
            let ga = g.matmul(&vb.transpose().unwrap()).expect("matmul backward");
            let gb = va.transpose().unwrap().matmul(g).expect("matmul backward");
            vec![ga, gb]
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.unary(a, out, |g| vec![g.transpose().expect("transpose backward")]))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_last()?;
        let y = out.clone();
        Ok(self.unary(a, out, move |g| {
            let (m, n) = (y.shape()[0], y.shape()[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &g.data()[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Tensor::from_vec(&[m, n], dx).expect("softmax backward")]
        }))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg) = (self.value(x).clone(), self.value(gain).clone());
        let out = vx.layernorm(&vg, self.value(bias), eps)?;
        let value = out.clone();
        Ok(self.push(
            value,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g| {
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let nf = n as f64;
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &vx.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(vg.data()).map(|(&gv, &gw)| gv * gw).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[i * n + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                vec![
                    Tensor::from_vec(&[m, n], dx).expect("layernorm backward"),
                    Tensor::from_vec(&[n], dgain).expect("layernorm backward"),
                    Tensor::from_vec(&[n], dbias).expect("layernorm backward"),
                ]
            })),
        ))
    }

    /// Embedding lookup: gathers rows of `table` by id. The backward pass
    /// scatter-adds into a zero table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table).clone();
        let out = vt.gather_rows(ids)?;
        let (v, n) = (vt.shape()[0], vt.shape()[1]);
        let ids = ids.to_vec();
        Ok(self.unary(table, out, move |g| {
            let mut dt = vec![0.0; v * n];
            for (k, &id) in ids.iter().enumerate() {
                for j in 0..n {
                    dt[id * n + j] += g.data()[k * n + j];
                }
            }
            vec![Tensor::from_vec(&[v, n], dt).expect("gather backward")]
        }))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let va = self.value(a).clone();
        let out = va.slice_rows(lo, hi)?;
        let (m, n) = (va.shape()[0], va.shape()[1]);
        Ok(self.unary(a, out, move |g| {
            let mut dx = vec![0.0; m * n];
            dx[lo * n..hi * n].copy_from_slice(g.data());
            vec![Tensor::from_vec(&[m, n], dx).expect("slice_rows backward")]
        }))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let va = self.value(a).clone();
        let out = va.slice_cols(lo, hi)?;
        let (m, n) = (va.shape()[0], va.shape()[1]);
        Ok(self.unary(a, out, move |g| {
            let w = hi - lo;
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + lo..i * n + hi].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Tensor::from_vec(&[m, n], dx).expect("slice_cols backward")]
        }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_rows(&values)?;
        let row_counts: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut lo = 0;
                for &rc in &row_counts {
                    grads.push(g.slice_rows(lo, lo + rc).expect("concat_rows backward"));
                    lo += rc;
                }
                grads
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::concat_cols(&values)?;
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut lo = 0;
                for &w in &widths {
                    grads.push(g.slice_cols(lo, lo + w).expect("concat_cols backward"));
                    lo += w;
                }
                grads
            })),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = Tensor::scalar(va.sum());
        let shape = va.shape().to_vec();
        self.unary(a, out, move |g| {
            let gv = g.data()[0];
            vec![Tensor::filled(&shape, gv)]
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let n = va.len() as f64;
        let out = Tensor::scalar(va.mean());
        let shape = va.shape().to_vec();
        self.unary(a, out, move |g| {
            let gv = g.data()[0] / n;
            vec![Tensor::filled(&shape, gv)]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a).clone();
        let out = va.reshape(shape)?;
        let orig = va.shape().to_vec();
        Ok(self.unary(a, out, move |g| {
            vec![g.reshape(&orig).expect("reshape backward")]
        }))
    }

    /// Runs the reverse sweep from `seeds` and returns the adjoint of each
    /// requested variable. Variables not reached by the sweep get zeros.
    pub fn vjp(&self, seeds: &[(Var, Tensor)], wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, seed) in seeds {
            if seed.shape() != self.value(*v).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "vjp seed",
                    lhs: seed.shape().to_vec(),
                    rhs: self.value(*v).shape().to_vec(),
                });
            }
            accumulate(&mut adjoints[v.0], seed)?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adjoints[idx].clone() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    accumulate(&mut adjoints[*p], &pg)?;
                }
            }
        }
        wrt.iter()
            .map(|v| {
                Ok(adjoints[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape())))
            })
            .collect()
    }

    /// Gradient of a scalar-valued output with respect to `params`.
    /// A parameter the output does not depend on gets a zero gradient.
    pub fn grad(&self, output: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "grad: output must be scalar, got shape {:?}",
                out.shape()
            )));
        }
        self.vjp(&[(output, Tensor::scalar(1.0))], params)
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: &Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(grad)?,
        None => grad.clone(),
    });
    Ok(())
}
