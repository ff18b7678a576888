use super::NnError;

/// Dense row-major fp64 array of order 0 to 4.
///
/// Image tensors use the batch × channel × height × width layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor, NnError> {
        if dims.len() > 4 {
            return Err(NnError::shape("tensor", format!("order {} exceeds 4", dims.len())));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(NnError::shape(
                "tensor",
                format!("dims {:?} need {} values, got {}", dims, n, data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as N × C × H × W.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize), NnError> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NnError::shape("nchw", format!("expected order 4, got dims {:?}", self.dims))),
        }
    }

    /// Interpret as rows × cols.
    pub fn matrix(&self) -> Result<(usize, usize), NnError> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(NnError::shape("matrix", format!("expected order 2, got dims {:?}", self.dims))),
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Tensor, NnError> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(NnError::shape("reshape", format!("{:?} -> {:?}", self.dims, dims)));
        }
        self.dims = dims;
        Ok(self)
    }

    /// Channels `[start, end)` of an N × C × H × W tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor, NnError> {
        let (n, c, h, w) = self.nchw()?;
        if start > end || end > c {
            return Err(NnError::shape("slice_channels", format!("[{start}, {end}) of {c} channels")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Tensor {
            dims: vec![n, end - start, h, w],
            data,
        })
    }

    /// Sample `index` of the batch dimension, keeping a leading extent of 1.
    pub fn batch_item(&self, index: usize) -> Result<Tensor, NnError> {
        let n = *self.dims.first().ok_or_else(|| NnError::shape("batch_item", "scalar"))?;
        if index >= n {
            return Err(NnError::shape("batch_item", format!("index {index} of {n}")));
        }
        let per = self.data.len() / n;
        let mut dims = self.dims.clone();
        dims[0] = 1;
        Ok(Tensor {
            dims,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        })
    }

    /// Stack equally shaped tensors with leading extent 1 along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor, NnError> {
        let first = items.first().ok_or_else(|| NnError::shape("stack", "no tensors"))?;
        let mut dims = first.dims.clone();
        if dims.first() != Some(&1) {
            return Err(NnError::shape("stack", format!("items must have leading 1, got {:?}", dims)));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(NnError::shape("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            data.extend_from_slice(&t.data);
        }
        dims[0] = items.len();
        Ok(Tensor { dims, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
