use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Tensor};
use crate::var::Var;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::dimension(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Element>(self, x: T, y: T) -> T {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

fn binary<T: Element>(a: &Var<T>, b: &Var<T>, kind: Binary) -> Result<Var<T>> {
    let op = kind.name();
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (ac, bc) = (a.clone(), b.clone());
    let (av, bv) = (a.value(), b.value());

    let data: Vec<T> = if a.shape() == b.shape() {
        av.data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| kind.apply(x, y))
            .collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        let (ad, bd) = (av.data(), bv.data());
        for_each_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
            data[i] = kind.apply(ad[oa], bd[ob]);
        });
        data
    };
    let value = Tensor::from_parts(out_shape.clone(), data);

    let need_a = a.requires_grad();
    let need_b = b.requires_grad();
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], move |g| {
        let (av, bv) = (ac.value(), bc.value());
        let sa = broadcast_strides(av.shape(), &out_shape);
        let sb = broadcast_strides(bv.shape(), &out_shape);
        let (ad, bd) = (av.data(), bv.data());
        let mut ga = need_a.then(|| vec![T::zero(); av.numel()]);
        let mut gb = need_b.then(|| vec![T::zero(); bv.numel()]);
        for_each_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
            let gi = g[i];
            let (da, db) = match kind {
                Binary::Add => (gi, gi),
                Binary::Sub => (gi, -gi),
                Binary::Mul => (gi * bd[ob], gi * ad[oa]),
                Binary::Div => {
                    let y = bd[ob];
                    (gi / y, -gi * ad[oa] / (y * y))
                }
            };
            if let Some(ga) = ga.as_mut() {
                ga[oa] = ga[oa] + da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ob] = gb[ob] + db;
            }
        });
        vec![ga, gb]
    }))
}

/// Applies `f` elementwise; `df(x, y)` is the derivative given input `x` and output `y`.
fn unary<T: Element>(
    a: &Var<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Var<T> {
    let value = a.value().map(f);
    let out = value.clone();
    let av = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        let x = av.data();
        let y = out.data();
        vec![Some(
            g.iter()
                .zip(x.iter().zip(y))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect(),
        )]
    })
}

impl<T: Element> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        binary(self, other, Binary::Div)
    }

    pub fn neg(&self) -> Var<T> {
        unary(self, |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, s: f64) -> Var<T> {
        let s = T::of(s);
        unary(self, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<T> {
        let s = T::of(s);
        unary(self, move |x| x + s, |_, _| T::one())
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Var<T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Var<T> {
        unary(self, |x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(&self) -> Var<T> {
        unary(self, |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn recip(&self) -> Var<T> {
        unary(self, |x| x.recip(), |_, y| -(y * y))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::of(slope);
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }
}
