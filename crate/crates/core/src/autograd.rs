//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every backward rule is itself written with differentiable [`Var`]
//! operations, so gradients can be taken through gradients
//! (`create_graph = true`). The R1 penalty relies on this.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

type BackwardFn = Box<dyn Fn(&Var, &[Var]) -> Vec<Option<Var>>>;

struct Node {
    value: RefCell<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &*self.0.value.borrow())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            value: RefCell::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    /// Trainable leaf (also used for inputs we differentiate against).
    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Tensor::scalar(v))
    }

    fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Var, &[Var]) -> Vec<Option<Var>> + 'static,
    ) -> Var {
        if grad_enabled() && parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value: RefCell::new(value),
                parents,
                backward: Some(Box::new(backward)),
                requires_grad: true,
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.value.borrow()
    }

    pub fn tensor(&self) -> Tensor {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.0.value.borrow().item()
    }

    /// Overwrites the value of a leaf. Used by optimizers and checkpoint
    /// loading; the shape must not change.
    pub fn set_value(&self, t: Tensor) -> Result<()> {
        if self.0.backward.is_some() {
            return Err(Error::Usage("set_value on a non-leaf variable".into()));
        }
        let mut v = self.0.value.borrow_mut();
        if v.shape() != t.shape() {
            return Err(Error::dim(format!(
                "set_value shape {:?} != {:?}",
                t.shape(),
                v.shape()
            )));
        }
        *v = t;
        Ok(())
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.tensor())
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&self, other: &Var) -> Var {
        let v = self
            .value()
            .zip_with(&other.value(), |a, b| a + b)
            .expect("add: incompatible shapes");
        let (sa, sb) = (self.shape(), other.shape());
        Var::from_op(v, vec![self.clone(), other.clone()], move |g, _| {
            vec![Some(g.sum_to(&sa)), Some(g.sum_to(&sb))]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self
            .value()
            .zip_with(&other.value(), |a, b| a - b)
            .expect("sub: incompatible shapes");
        let (sa, sb) = (self.shape(), other.shape());
        Var::from_op(v, vec![self.clone(), other.clone()], move |g, _| {
            vec![Some(g.sum_to(&sa)), Some(g.neg().sum_to(&sb))]
        })
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self
            .value()
            .zip_with(&other.value(), |a, b| a * b)
            .expect("mul: incompatible shapes");
        let (sa, sb) = (self.shape(), other.shape());
        Var::from_op(v, vec![self.clone(), other.clone()], move |g, p| {
            vec![
                p[0].requires_grad().then(|| g.mul(&p[1]).sum_to(&sa)),
                p[1].requires_grad().then(|| g.mul(&p[0]).sum_to(&sb)),
            ]
        })
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self
            .value()
            .zip_with(&other.value(), |a, b| a / b)
            .expect("div: incompatible shapes");
        let (sa, sb) = (self.shape(), other.shape());
        Var::from_op(v, vec![self.clone(), other.clone()], move |g, p| {
            vec![
                p[0].requires_grad().then(|| g.div(&p[1]).sum_to(&sa)),
                p[1].requires_grad().then(|| {
                    g.mul(&p[0])
                        .div(&p[1].mul(&p[1]))
                        .neg()
                        .sum_to(&sb)
                }),
            ]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().map(|a| a * c);
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().map(|a| a + c);
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.value().map(f64::sqrt);
        Var::from_op(v, vec![self.clone()], |g, p| {
            vec![Some(g.scale(0.5).div(&p[0].sqrt()))]
        })
    }

    pub fn exp(&self) -> Var {
        let v = self.value().map(f64::exp);
        Var::from_op(v, vec![self.clone()], |g, p| vec![Some(g.mul(&p[0].exp()))])
    }

    pub fn ln(&self) -> Var {
        let v = self.value().map(f64::ln);
        Var::from_op(v, vec![self.clone()], |g, p| vec![Some(g.div(&p[0]))])
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(sigmoid);
        Var::from_op(v, vec![self.clone()], |g, p| {
            let s = p[0].sigmoid();
            vec![Some(g.mul(&s.mul(&s.neg().add_scalar(1.0))))]
        })
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Var {
        let v = self.value().map(softplus);
        Var::from_op(v, vec![self.clone()], |g, p| vec![Some(g.mul(&p[0].sigmoid()))])
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let x = self.tensor();
        let v = x.map(|a| if a > 0.0 { a } else { a * slope });
        let d = Var::constant(x.map(|a| if a > 0.0 { 1.0 } else { slope }));
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.mul(&d))])
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn abs(&self) -> Var {
        let x = self.tensor();
        let v = x.map(f64::abs);
        let sign = Var::constant(x.map(|a| {
            if a > 0.0 {
                1.0
            } else if a < 0.0 {
                -1.0
            } else {
                0.0
            }
        }));
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.mul(&sign))])
    }

    // -- shape & reduction -----------------------------------------------

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        let src = self.shape();
        if src == shape {
            return self.clone();
        }
        let v = self.value().sum_to(shape).expect("sum_to: incompatible shapes");
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.expand(&src))])
    }

    pub fn expand(&self, shape: &[usize]) -> Var {
        let src = self.shape();
        if src == shape {
            return self.clone();
        }
        let v = self.value().expand(shape).expect("expand: incompatible shapes");
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.sum_to(&src))])
    }

    /// Sum of all entries as a rank-0 value.
    pub fn sum(&self) -> Var {
        let src = self.shape();
        let ones = vec![1; src.len()];
        let total = self.value().sum();
        Var::from_op(Tensor::scalar(total), vec![self.clone()], move |g, _| {
            vec![Some(g.reshape(&ones).expand(&src))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let src = self.shape();
        if src == shape {
            return self.clone();
        }
        let v = self.value().reshape(shape).expect("reshape: element count");
        Var::from_op(v, vec![self.clone()], move |g, _| vec![Some(g.reshape(&src))])
    }

    /// Swaps the last two axes of a rank-3 value.
    pub fn transpose(&self) -> Var {
        let v = self.value().transpose_last().expect("transpose: rank-3 input");
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.transpose())])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let total = self.shape()[axis];
        let v = self.value().narrow(axis, start, len).expect("narrow: range");
        Var::from_op(v, vec![self.clone()], move |g, _| {
            vec![Some(g.pad_axis(axis, start, total))]
        })
    }

    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        let len = self.shape()[axis];
        let v = self.value().pad_axis(axis, start, total).expect("pad_axis: range");
        Var::from_op(v, vec![self.clone()], move |g, _| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<Tensor> = parts.iter().map(Var::tensor).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let v = Tensor::concat(&refs, axis).expect("concat: shapes");
        let lens: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        Var::from_op(v, parts.to_vec(), move |g, _| {
            let mut start = 0;
            lens.iter()
                .map(|&l| {
                    let piece = g.narrow(axis, start, l);
                    start += l;
                    Some(piece)
                })
                .collect()
        })
    }

    // -- linear algebra --------------------------------------------------

    /// Batched matrix product of rank-3 values.
    pub fn bmm(&self, other: &Var) -> Var {
        let v = tensor::bmm(&self.value(), &other.value()).expect("bmm: shapes");
        Var::from_op(v, vec![self.clone(), other.clone()], |g, p| {
            vec![
                p[0].requires_grad().then(|| g.bmm(&p[1].transpose())),
                p[1].requires_grad().then(|| p[0].transpose().bmm(g)),
            ]
        })
    }

    /// Product of rank-2 values.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.shape();
        let b = other.shape();
        assert!(a.len() == 2 && b.len() == 2, "matmul expects matrices");
        self.reshape(&[1, a[0], a[1]])
            .bmm(&other.reshape(&[1, b[0], b[1]]))
            .reshape(&[a[0], b[1]])
    }

    /// Matrix transpose of a rank-2 value.
    pub fn t(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "t() expects a matrix");
        self.reshape(&[1, s[0], s[1]]).transpose().reshape(&[s[1], s[0]])
    }

    // -- spatial -----------------------------------------------------------

    /// Stride-1 "same" convolution with kernel `w` (`[Cout, Cin, k, k]`).
    pub fn conv2d(&self, w: &Var) -> Var {
        let v = tensor::conv2d(&self.value(), &w.value()).expect("conv2d: shapes");
        Var::from_op(v, vec![self.clone(), w.clone()], |g, p| {
            let k = p[1].shape()[2];
            vec![
                p[0].requires_grad().then(|| conv_input_grad(g, &p[1])),
                p[1].requires_grad().then(|| conv_weight_grad(&p[0], g, k)),
            ]
        })
    }

    pub fn upsample2(&self) -> Var {
        let v = tensor::upsample2(&self.value()).expect("upsample2: rank-4 input");
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.avgpool2().scale(4.0))])
    }

    pub fn avgpool2(&self) -> Var {
        let v = tensor::avgpool2(&self.value()).expect("avgpool2: even dims");
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.upsample2().scale(0.25))])
    }

    pub fn blur(&self) -> Var {
        let v = tensor::blur(&self.value()).expect("blur: rank-4 input");
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.blur_transpose())])
    }

    fn blur_transpose(&self) -> Var {
        let v = tensor::blur_transpose(&self.value()).expect("blur: rank-4 input");
        Var::from_op(v, vec![self.clone()], |g, _| vec![Some(g.blur())])
    }

    // -- composites ------------------------------------------------------

    /// Softmax over axis 1 of a rank-4 value.
    pub fn softmax_channels(&self) -> Var {
        let x = self.tensor();
        let shape = x.shape().to_vec();
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let mut shift = vec![f64::NEG_INFINITY; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    let v = x.data()[(bi * c + ci) * hw + p];
                    let s = &mut shift[bi * hw + p];
                    *s = s.max(v);
                }
            }
        }
        let shift = Var::constant(Tensor::from_vec(&[b, 1, shape[2], shape[3]], shift));
        let e = self.sub(&shift).exp();
        let z = e.sum_axes(&[1]);
        e.div(&z)
    }
}

fn conv_input_grad(g: &Var, w: &Var) -> Var {
    let v = tensor::conv2d_input_grad(&g.value(), &w.value()).expect("conv grad shapes");
    Var::from_op(v, vec![g.clone(), w.clone()], |u, p| {
        let k = p[1].shape()[2];
        vec![
            p[0].requires_grad().then(|| u.conv2d(&p[1])),
            p[1].requires_grad().then(|| conv_weight_grad(u, &p[0], k)),
        ]
    })
}

fn conv_weight_grad(x: &Var, g: &Var, k: usize) -> Var {
    let v = tensor::conv2d_weight_grad(&x.value(), &g.value(), k).expect("conv grad shapes");
    Var::from_op(v, vec![x.clone(), g.clone()], |u, p| {
        vec![
            p[0].requires_grad().then(|| conv_input_grad(&p[1], u)),
            p[1].requires_grad().then(|| p[0].conv2d(u)),
        ]
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to `inputs`.
///
/// Inputs unreachable from `output` get `None`. With `create_graph` the
/// returned gradients are themselves differentiable.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(output.value().numel(), 1, "grad() needs a scalar output");
    let seed = Var::constant(Tensor::ones(&output.shape()));
    grad_with_seed(output, seed, inputs, create_graph)
}

pub fn grad_with_seed(
    output: &Var,
    seed: Var,
    inputs: &[&Var],
    create_graph: bool,
) -> Vec<Option<Var>> {
    let _guard = (!create_graph).then(no_grad);
    let wanted: HashSet<usize> = inputs.iter().map(|v| v.id()).collect();
    let mut pending: HashMap<usize, Var> = HashMap::new();
    let mut found: HashMap<usize, Var> = HashMap::new();
    if output.requires_grad() {
        pending.insert(output.id(), seed);
    }
    for node in topo_order(output).iter().rev() {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        if wanted.contains(&node.id()) {
            found.insert(node.id(), g.clone());
        }
        let Some(backward) = &node.0.backward else {
            continue;
        };
        let grads = backward(&g, &node.0.parents);
        for (parent, pg) in node.0.parents.iter().zip(grads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match pending.remove(&parent.id()) {
                Some(prev) => prev.add(&pg),
                None => pg,
            };
            pending.insert(parent.id(), acc);
        }
    }
    inputs.iter().map(|v| found.remove(&v.id())).collect()
}

/// Gradient values (no graph) for every input, zero-filled where the output
/// does not depend on an input.
pub fn grad_values(output: &Var, inputs: &[&Var]) -> Vec<Tensor> {
    grad(output, inputs, false)
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| g.map(|g| g.tensor()).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&Var) -> Var, x0: Tensor) {
        let x = Var::param(x0.clone());
        let g = grad_values(&f(&x), &[&x]).remove(0);
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fp = f(&Var::constant(p)).item();
            let fm = f(&Var::constant(m)).item();
            let fd = (fp - fm) / (2.0 * h);
            let ad = g.data()[i];
            assert!(
                (fd - ad).abs() <= 1e-6 * (1.0 + fd.abs()),
                "entry {i}: fd {fd} vs ad {ad}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::randn(&[2, 3], &mut rng);
        let c = Var::constant(Tensor::randn(&[1, 3], &mut rng));
        fd_check(|x| x.mul(&c).add(&x.square()).sum(), x0.clone());
        fd_check(|x| x.square().add_scalar(1.0).sqrt().sum(), x0.clone());
        fd_check(|x| x.softplus().mul(&x.sigmoid()).sum(), x0.clone());
        fd_check(|x| x.exp().add_scalar(1.0).ln().div(&c.square().add_scalar(1.0)).sum(), x0.clone());
        fd_check(|x| c.div(&x.square().add_scalar(0.5)).sum(), x0);
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 3, 4, 4], &mut rng);
        let w = Var::constant(Tensor::randn(&[2, 3, 3, 3], &mut rng));
        let t = Var::constant(Tensor::randn(&[2, 2, 2, 2], &mut rng));
        fd_check(|x| x.conv2d(&w).avgpool2().mul(&t).sum(), x0.clone());
        fd_check(|x| x.blur().upsample2().square().mean(), x0.clone());
        fd_check(|x| x.softmax_channels().square().sum(), x0.clone());
        fd_check(
            |x| {
                let m = x.reshape(&[2, 3, 16]);
                m.bmm(&m.transpose()).narrow(1, 1, 2).square().sum()
            },
            x0.clone(),
        );
        fd_check(
            |x| Var::concat(&[x.narrow(1, 0, 1), x.scale(2.0)], 1).square().sum(),
            x0,
        );
    }

    #[test]
    fn kernel_gradient_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::constant(Tensor::randn(&[2, 2, 3, 3], &mut rng));
        let w0 = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        fd_check(|w| x.conv2d(w).square().sum(), w0);
    }

    #[test]
    fn second_order_through_conv_matches_finite_difference() {
        // d/dw of ||d/dx sum(lrelu(conv(x, w)))||^2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[1, 2, 4, 4], &mut rng);
        let penalty = |w: &Var| {
            let x = Var::param(x0.clone());
            let y = x.conv2d(w).leaky_relu(0.2).square().sum();
            let gx = grad(&y, &[&x], true).remove(0).unwrap();
            gx.square().sum()
        };
        fd_check(penalty, Tensor::randn(&[2, 2, 3, 3], &mut rng));
    }

    #[test]
    fn detach_and_unreachable_inputs_yield_none() {
        let a = Var::param(Tensor::ones(&[2]));
        let b = Var::param(Tensor::ones(&[2]));
        let y = a.detach().mul(&b).sum();
        let g = grad(&y, &[&a, &b], false);
        assert!(g[0].is_none());
        assert_eq!(g[1].as_ref().unwrap().tensor().data(), &[1.0, 1.0]);
    }

    #[test]
    fn no_grad_builds_constants() {
        let a = Var::param(Tensor::ones(&[2]));
        let _g = no_grad();
        assert!(!a.scale(2.0).requires_grad());
    }
}
