//! Dense 32-bit float tensors and the tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is the plain value type (shape + row-major data + optional
//! gradient). Differentiable computation happens through [`Tape`] / [`Var`]:
//! every primitive records itself on the tape, and [`Var::backward`] replays
//! the recorded list in reverse to fill in leaf gradients.

mod grad_check;
mod kernels;
mod tape;

pub use grad_check::{grad_check, replay_f64};
pub use kernels::matmul_nn_f32;
pub use tape::{Op, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Version written into ATSR headers.
const ATSR_VERSION: u16 = 1;
const ATSR_MAGIC: &[u8; 4] = b"ATSR";

/// N-dimensional 32-bit float array, row-major. Images use
/// (batch, channel, height, width) layout throughout the crate; scalars use
/// shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::from_vec", format!("zero-sized dimension in {shape:?}")));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Deterministic uniform fill in [low, high).
    pub fn uniform(shape: Vec<usize>, low: f32, high: f32, seed: u64) -> Result<Tensor> {
        if low >= high {
            return Err(Error::param("Tensor::uniform", format!("low {low} must be < high {high}")));
        }
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::uniform", format!("invalid shape {shape:?}")));
        }
        let mut rng = Rng::new(seed);
        let n = numel(&shape);
        let data: Vec<f32> = (0..n).map(|_| rng.uniform(low, high)).collect();
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn requires_grad(mut self, yes: bool) -> Tensor {
        self.requires_grad = yes;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Write in ATSR format: magic `ATSR`, u16 LE version, u8 rank,
    /// rank x u32 LE dims, then row-major f32 LE payload. Bit-exact round trip.
    pub fn save_atsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(7 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_atsr(&mut buf).expect("in-memory write cannot fail");
        std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), &e))
    }

    pub fn load_atsr(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
        Tensor::read_atsr(&mut bytes.as_slice())
    }

    pub fn write_atsr(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(ATSR_MAGIC)?;
        w.write_all(&ATSR_VERSION.to_le_bytes())?;
        w.write_all(&[self.shape.len() as u8])?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_atsr(r: &mut impl Read) -> Result<Tensor> {
        let fail = |d: String| Error::format("ATSR", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| fail(format!("truncated magic: {e}")))?;
        if &magic != ATSR_MAGIC {
            return Err(fail(format!("bad magic {magic:?}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|e| fail(format!("truncated version: {e}")))?;
        let version = u16::from_le_bytes(b2);
        if version != ATSR_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1).map_err(|e| fail(format!("truncated rank: {e}")))?;
        let rank = b1[0] as usize;
        if rank == 0 || rank > 8 {
            return Err(fail(format!("rank {rank} out of range 1..=8")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b4 = [0u8; 4];
        for _ in 0..rank {
            r.read_exact(&mut b4).map_err(|e| fail(format!("truncated dims: {e}")))?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n = numel(&shape);
        if shape.iter().any(|&d| d == 0) || n > (1 << 31) {
            return Err(fail(format!("unreasonable shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(|e| fail(format!("truncated payload: {e}")))?;
            data.push(f32::from_le_bytes(b4));
        }
        // A well-formed stream ends exactly at the payload boundary when the
        // tensor is the whole file; embedded ATSR blocks leave the cursor here.
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_deterministic_per_seed() {
        let a = Tensor::uniform(vec![1, 3, 2, 2], 0.0, 1.0, 7).unwrap();
        let b = Tensor::uniform(vec![1, 3, 2, 2], 0.0, 1.0, 7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.len(), 12);
        assert!(a.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let c = Tensor::uniform(vec![1, 3, 2, 2], 0.0, 1.0, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn uniform_degenerate_range_stays_tiny() {
        let eps = 1e-6f32;
        let t = Tensor::uniform(vec![100], 0.0, eps, 3).unwrap();
        assert!(t.data().iter().all(|&v| (0.0..eps).contains(&v)));
    }

    #[test]
    fn uniform_mean_of_million_draws() {
        let t = Tensor::uniform(vec![1_000_000], 0.0, 1.0, 11).unwrap();
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_rejects_bad_args() {
        assert!(Tensor::uniform(vec![2, 0], 0.0, 1.0, 0).is_err());
        assert!(Tensor::uniform(vec![2], 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn atsr_round_trip_bit_exact() {
        let t = Tensor::from_vec(
            vec![2, 3],
            vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, 3.14159, -2.5e-7],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("advdip_atsr_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.atsr");
        t.save_atsr(&p).unwrap();
        let back = Tensor::load_atsr(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn atsr_rejects_corruption() {
        let t = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_atsr(&mut buf).unwrap();
        // Truncated payload.
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(Tensor::read_atsr(&mut &cut[..]), Err(Error::Format { .. })));
        // Bad magic.
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_atsr(&mut &bad[..]), Err(Error::Format { .. })));
        // Bad version.
        let mut badv = buf;
        badv[4] = 0xFF;
        assert!(matches!(Tensor::read_atsr(&mut &badv[..]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn atsr_round_trip_property(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let t = Tensor::uniform(dims, -3.0, 3.0, seed).unwrap();
            let mut buf = Vec::new();
            t.write_atsr(&mut buf).unwrap();
            let back = Tensor::read_atsr(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
