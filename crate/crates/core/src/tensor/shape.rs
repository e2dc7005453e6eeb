/// Numpy-style broadcast of two shapes, aligned from the right.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for (i, o) in out.iter_mut().enumerate() {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        *o = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out`, the flat index of the element of a tensor
/// with shape `input` that broadcasting maps onto it.
pub(crate) fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let in_strides = strides(input);
    // Stride per output axis; 0 where the input is broadcast.
    let mut eff = vec![0usize; rank];
    for (i, e) in eff.iter_mut().enumerate() {
        let from_right = rank - 1 - i;
        if from_right < input.len() {
            let axis = input.len() - 1 - from_right;
            if input[axis] != 1 {
                *e = in_strides[axis];
            }
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            offset -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
