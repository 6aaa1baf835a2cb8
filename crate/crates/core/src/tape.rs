//! Reverse-mode tape over the ops in [`crate::ops`].
//!
//! Parameters are borrowed, not copied; gradients are returned per parameter
//! slot in the order the caller registered them.

use std::borrow::Cow;

use crate::error::{shape_err, Result};
use crate::ops::{self, ChannelMask, DropoutMode};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Option<ChannelMask<T>>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
        channels_a: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
}

struct Node<'w, T: Real> {
    value: Cow<'w, Tensor<T>>,
    op: Op<T>,
    /// Whether any parameter feeds this node.
    tracked: bool,
}

pub struct Tape<'w, T: Real> {
    nodes: Vec<Node<'w, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Real> Tape<'w, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'w, Tensor<T>>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Input, false)
    }

    /// Registers a borrowed parameter under gradient slot `slot`.
    pub fn param(&mut self, slot: usize, t: &'w Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(slot), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(
            Cow::Owned(y),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let tracked = self.tracked(x);
        self.push(Cow::Owned(y), Op::Relu(x), tracked)
    }

    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        mode: DropoutMode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let (y, mask) = ops::spatial_dropout(self.value(x), p, mode, rng)?;
        let tracked = self.tracked(x);
        Ok(self.push(Cow::Owned(y), Op::Dropout { x, mask }, tracked))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::nearest_upsample(self.value(x), factor)?;
        let tracked = self.tracked(x);
        Ok(self.push(Cow::Owned(y), Op::Upsample { x, factor }, tracked))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let channels_a = self.value(a).dims4()?.1;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Cow::Owned(y), Op::Concat { a, b, channels_a }, tracked))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = ops::clamp(self.value(x), lo, hi);
        let tracked = self.tracked(x);
        self.push(Cow::Owned(y), Op::Clamp { x, lo, hi }, tracked)
    }

    /// Which side of its kink every ReLU and clamp input lies on. Two points
    /// with equal patterns lie in the same piecewise-smooth region.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => pattern.extend(self.value(x).data().iter().map(|&v| v > T::zero())),
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(x).data() {
                        pattern.push(v > lo);
                        pattern.push(v < hi);
                    }
                }
                _ => {}
            }
        }
        pattern
    }

    /// Propagates `seeds` (gradients of a scalar objective with respect to
    /// the given vars) back to every registered parameter slot.
    pub fn backward(
        &self,
        seeds: Vec<(Var, Tensor<T>)>,
        slots: usize,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(shape_err!(
                    "seed gradient {:?} does not match value {:?}",
                    g.shape(),
                    self.value(v).shape()
                ));
            }
            accumulate(&mut grads[v.0], g)?;
        }
        let mut params: Vec<Option<Tensor<T>>> = vec![None; slots];
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    let entry = params.get_mut(*slot).ok_or_else(|| {
                        shape_err!("parameter slot {slot} out of range for {slots} slots")
                    })?;
                    accumulate(entry, g)?;
                }
                &Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let cg = ops::conv2d_grad(
                        self.value(x),
                        self.value(w),
                        self.value(b),
                        stride,
                        pad,
                        &g,
                    )?;
                    self.send(&mut grads, x, cg.input)?;
                    self.send(&mut grads, w, cg.kernel)?;
                    self.send(&mut grads, b, cg.bias)?;
                }
                &Op::Relu(x) => {
                    let gx = ops::relu_grad(self.value(x), &g)?;
                    self.send(&mut grads, x, gx)?;
                }
                Op::Dropout { x, mask } => {
                    let gx = ops::spatial_dropout_grad(mask.as_ref(), &g)?;
                    self.send(&mut grads, *x, gx)?;
                }
                &Op::Upsample { x, factor } => {
                    let gx = ops::nearest_upsample_grad(&g, factor)?;
                    self.send(&mut grads, x, gx)?;
                }
                &Op::Concat { a, b, channels_a } => {
                    let (ga, gb) = ops::split_channels(&g, channels_a)?;
                    self.send(&mut grads, a, ga)?;
                    self.send(&mut grads, b, gb)?;
                }
                &Op::Clamp { x, lo, hi } => {
                    let gx = ops::clamp_grad(self.value(x), lo, hi, &g)?;
                    self.send(&mut grads, x, gx)?;
                }
            }
        }
        Ok(params)
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) -> Result<()> {
        if self.tracked(to) {
            accumulate(&mut grads[to.0], g)?;
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_gradients_accumulate() {
        // y = relu(x * w) + relu(x * w) through two identical 1x1 convs.
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 1, 1], 3.0));
        let wv = tape.param(0, &w);
        let bv = tape.param(1, &b);
        let y1 = tape.conv2d(x, wv, bv, 1, 0).unwrap();
        let y2 = tape.conv2d(x, wv, bv, 1, 0).unwrap();
        let grads = tape
            .backward(
                vec![
                    (y1, Tensor::full(&[1, 1, 1, 1], 1.0)),
                    (y2, Tensor::full(&[1, 1, 1, 1], 1.0)),
                ],
                2,
            )
            .unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), [6.0]);
        assert_eq!(grads[1].as_ref().unwrap().data(), [2.0]);
    }

    #[test]
    fn seed_shape_checked() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(tape
            .backward(vec![(x, Tensor::zeros(&[1, 1, 2, 3]))], 0)
            .is_err());
    }
}
