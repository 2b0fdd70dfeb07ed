//! Dense row-major tensors. Rank is arbitrary, but the graph ops in this
//! crate work on rank-2 views: `[rows, cols]`, with scalars as `[1, 1]`.

/// A dense f64 tensor with an optional gradient buffer.
///
/// `data` is row-major. `grad`, when present, has the same length as `data`
/// and accumulates additively; callers reset it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(&[1, 1], vec![x])
    }

    /// Shape-only tensor used by dry-run graphs; `data` stays empty.
    pub fn shape_only(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Vec::new(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows of a rank-2 tensor (rank-1 tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Ensures the grad buffer exists and returns it.
    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_cols_for_common_ranks() {
        let t = Tensor::zeros(&[3, 4]);
        assert_eq!((t.rows(), t.cols()), (3, 4));
        let v = Tensor::zeros(&[5]);
        assert_eq!((v.rows(), v.cols()), (1, 5));
        let s = Tensor::scalar(2.5);
        assert_eq!((s.rows(), s.cols()), (1, 1));
        assert_eq!(s.data, vec![2.5]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn from_vec_rejects_wrong_length() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn grad_buffer_is_lazy_and_accumulates() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.grad.is_none());
        t.grad_mut()[0] += 1.5;
        t.grad_mut()[0] += 1.5;
        assert_eq!(t.grad.as_ref().unwrap()[0], 3.0);
        t.zero_grad();
        assert_eq!(t.grad.as_ref().unwrap()[0], 0.0);
    }
}
