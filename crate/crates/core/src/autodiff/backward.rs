use super::graph::{Graph, NodeKind, Op, Var};
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

impl Graph {
    /// Reverse-mode gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the backward computation is itself recorded, so the
    /// returned gradients are differentiable functions of the graph's leaves.
    /// Without it the gradients are constants and the graph is marked consumed.
    /// Entries of `wrt` that do not influence `output` get zero gradients.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.shape(output).to_vec()));
        }
        let saved = self.recording;
        self.recording = create_graph;
        let result = self.backward(output, wrt);
        self.recording = saved;
        if !create_graph {
            self.consumed = true;
        }
        result
    }

    fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let end = output.0 + 1;
        let mut is_target = vec![false; end];
        for w in wrt.iter().filter(|w| w.0 < end) {
            is_target[w.0] = true;
        }
        // needed[i]: node i is differentiable and lies on a path to some target.
        let mut needed = vec![false; end];
        for i in 0..end {
            let node = &self.nodes[i];
            needed[i] = node.differentiable && (is_target[i] || node.inputs.iter().any(|v| needed[v.0]));
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if needed[output.0] {
            let seed = Tensor::full(self.shape(output), 1.0);
            adjoint[output.0] = Some(self.constant(seed));
        }
        // Reverse append order fixes the accumulation order.
        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(upstream) = adjoint[i] else { continue };
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else { continue };
            let op = op.clone();
            let inputs = node.inputs.clone();
            let mask: Vec<bool> = inputs.iter().map(|v| needed[v.0]).collect();
            let grads = self.vjp(&op, &inputs, Var(i), upstream, &mask)?;
            for ((input, g), want) in inputs.iter().zip(grads).zip(mask) {
                let (true, Some(g)) = (want, g) else { continue };
                adjoint[input.0] = Some(match adjoint[input.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of one node. Only inputs with `mask` set are computed.
    fn vjp(&mut self, op: &Op, inputs: &[Var], out: Var, go: Var, mask: &[bool]) -> Result<Vec<Option<Var>>> {
        let x = inputs[0];
        let one = |g: Var| Ok(vec![Some(g)]);
        match op {
            Op::Add => Ok(vec![Some(go), Some(go)]),
            Op::Sub => {
                let gb = if mask[1] { Some(self.neg(go)?) } else { None };
                Ok(vec![Some(go), gb])
            }
            Op::Mul => {
                let b = inputs[1];
                let ga = if mask[0] { Some(self.mul(go, b)?) } else { None };
                let gb = if mask[1] { Some(self.mul(go, x)?) } else { None };
                Ok(vec![ga, gb])
            }
            Op::Div => {
                let b = inputs[1];
                let ga = if mask[0] { Some(self.div(go, b)?) } else { None };
                let gb = if mask[1] {
                    let t = self.mul(go, out)?;
                    let t = self.div(t, b)?;
                    Some(self.neg(t)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Scale(c) => one(self.scale(go, *c)?),
            Op::AddScalar(_) => one(go),
            Op::Sqrt => {
                let half = self.scale(go, 0.5)?;
                one(self.div(half, out)?)
            }
            Op::Exp => one(self.mul(go, out)?),
            Op::Log => one(self.div(go, x)?),
            Op::Tanh => {
                let y2 = self.mul(out, out)?;
                let t = self.mul(go, y2)?;
                one(self.sub(go, t)?)
            }
            Op::Gelu => {
                let d = self.gelu_grad(x)?;
                one(self.mul(go, d)?)
            }
            Op::GeluGrad => {
                // d/dx [Phi(x) + x phi(x)] = phi(x) (2 - x^2)
                let x2 = self.mul(x, x)?;
                let e = self.scale(x2, -0.5)?;
                let e = self.exp(e)?;
                let phi = self.scale(e, 1.0 / (2.0 * std::f64::consts::PI).sqrt())?;
                let t = self.scale(x2, -1.0)?;
                let t = self.add_scalar(t, 2.0)?;
                let d = self.mul(phi, t)?;
                one(self.mul(go, d)?)
            }
            Op::Matmul => {
                let b = inputs[1];
                let ga = if mask[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(go, bt)?)
                } else {
                    None
                };
                let gb = if mask[1] {
                    let at = self.transpose(x)?;
                    Some(self.matmul(at, go)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Transpose => one(self.transpose(go)?),
            Op::Reshape(_) => {
                let shape = self.shape(x).to_vec();
                one(self.reshape(go, &shape)?)
            }
            Op::Slice { axis, start, len } => {
                let shape = self.shape(x).to_vec();
                let after = shape[*axis] - start - len;
                let mut parts = Vec::with_capacity(3);
                for (n, is_go) in [(*start, false), (*len, true), (after, false)] {
                    if is_go {
                        parts.push(go);
                    } else if n > 0 {
                        let mut s = shape.clone();
                        s[*axis] = n;
                        parts.push(self.constant(Tensor::zeros(&s)));
                    }
                }
                one(self.concat(&parts, *axis)?)
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (i, &input) in inputs.iter().enumerate() {
                    let n = self.shape(input)[*axis];
                    grads.push(if mask[i] {
                        Some(self.slice(go, *axis, offset, n)?)
                    } else {
                        None
                    });
                    offset += n;
                }
                Ok(grads)
            }
            Op::Sum => {
                let shape = self.shape(x).to_vec();
                one(self.expand(go, &shape)?)
            }
            Op::Expand(_) => {
                let s = self.sum(go)?;
                let shape = self.shape(x).to_vec();
                one(self.reshape(s, &shape)?)
            }
            Op::SumLast => {
                let n = *self.shape(x).last().expect("sum_last input has rank >= 1");
                one(self.expand_last(go, n)?)
            }
            Op::ExpandLast(_) => one(self.sum_last(go)?),
            Op::SumLeading => {
                let s = self.shape(x);
                let lead = s[..s.len() - 1].to_vec();
                one(self.expand_leading(go, &lead)?)
            }
            Op::ExpandLeading(_) => one(self.sum_leading(go)?),
            Op::Softmax => {
                // y * (go - sum(go * y))
                let n = *self.shape(out).last().expect("softmax has rank >= 1");
                let gy = self.mul(go, out)?;
                let s = self.sum_last(gy)?;
                let s = self.expand_last(s, n)?;
                let d = self.sub(go, s)?;
                one(self.mul(out, d)?)
            }
            Op::CrossEntropy(targets) => {
                let shape = self.shape(x).to_vec();
                let (rows, classes) = (shape[0], shape[1]);
                let mut onehot = vec![0.0; rows * classes];
                for (r, &t) in targets.iter().enumerate() {
                    onehot[r * classes + t] = 1.0;
                }
                let onehot = self.constant(Tensor::from_parts(shape.clone(), onehot));
                let p = self.softmax(x)?;
                let diff = self.sub(p, onehot)?;
                let g = self.expand(go, &shape)?;
                let g = self.mul(g, diff)?;
                one(self.scale(g, 1.0 / rows as f64)?)
            }
            Op::Gather(ids) => {
                let rows = self.shape(x)[0];
                one(self.scatter_add(go, ids, rows)?)
            }
            Op::ScatterAdd { ids, .. } => one(self.gather(go, ids)?),
        }
    }
}
