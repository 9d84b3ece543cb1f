use crate::error::{Error, Result};

/// Index plan for a numpy-style broadcast of two shapes.
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    /// For every output element, the flat index into `a` and into `b`.
    pub a_index: Vec<usize>,
    pub b_index: Vec<usize>,
}

fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - shape.len()];
    s.extend_from_slice(shape);
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        st[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    st
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
        let rank = a.len().max(b.len());
        let (pa, pb) = (padded(a, rank), padded(b, rank));
        let mut out_shape = Vec::with_capacity(rank);
        for (axis, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
            let d = match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(
                        op,
                        format!("cannot broadcast {a:?} with {b:?} (axis {axis}: {x} vs {y})"),
                    ))
                }
            };
            out_shape.push(d);
        }
        let (sa, sb) = (strides(&pa), strides(&pb));
        let n: usize = out_shape.iter().product();
        let mut a_index = Vec::with_capacity(n);
        let mut b_index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..n {
            a_index.push(ia);
            b_index.push(ib);
            // odometer increment, innermost axis first
            for axis in (0..rank).rev() {
                counter[axis] += 1;
                ia += sa[axis];
                ib += sb[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                ia -= sa[axis] * out_shape[axis];
                ib -= sb[axis] * out_shape[axis];
                counter[axis] = 0;
            }
        }
        Ok(Broadcast {
            out_shape,
            a_index,
            b_index,
        })
    }
}
