use crate::error::{Error, Result};

/// `(batch, channels, z, y, x)` array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    pub shape: [usize; 5],
    pub values: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Copy + Default> Tensor5<T> {
    pub fn new(shape: [usize; 5], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!(
                "tensor {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            values: vec![T::default(); shape.iter().product()],
            grad: None,
        }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Values of one sample, all channels.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.voxels();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.values[start..start + v]
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![T::default(); self.values.len()]);
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if self.values.len() != n || self.grad.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::Shape(format!("tensor {:?} has inconsistent storage", self.shape)));
        }
        Ok(())
    }
}
