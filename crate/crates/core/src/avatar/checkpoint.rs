//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "AVFG"
//! version      u32
//! R            u32      radiance grid resolution
//! R_d          u32      deformation grid resolution
//! m            u32      expression dimension
//! background   3 x f32
//! step         u64      optimizer updates applied
//! flags        u32      bit 0: optimizer moments present
//! grid         R^3 x 4 f32         [density, r, g, b] raw per vertex
//! basis        R_d^3 x m x 3 f32
//! moments      grid m, grid v, basis m, basis v (f32, when flagged)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AdamState, AvatarModel, AvatarState, DeformationBasis, RadianceGrid};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVFG";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 * 4 + 3 * 4 + 8 + 4;
const MAX_RESOLUTION: u32 = 1024;

pub fn save_checkpoint(path: &Path, state: &AvatarState) -> Result<()> {
    let model = &state.model;
    let opt = &state.optimizer;
    let mut buf =
        Vec::with_capacity(HEADER_LEN + 4 * (model.grid.params.len() + model.basis.weights.len()));
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        model.grid.resolution as u32,
        model.basis.resolution as u32,
        model.basis.count as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in model.background {
        buf.extend_from_slice(&(c as f32).to_le_bytes());
    }
    buf.extend_from_slice(&opt.step.to_le_bytes());
    buf.extend_from_slice(&u32::from(opt.has_moments()).to_le_bytes());
    let mut put = |xs: &[f64]| {
        for &x in xs {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    put(&model.grid.params);
    put(&model.basis.weights);
    if opt.has_moments() {
        put(&opt.grid_m);
        put(&opt.grid_v);
        put(&opt.basis_m);
        put(&opt.basis_v);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<AvatarState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an avatar checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (res, dres, m) = (r.u32()?, r.u32()?, r.u32()?);
    if !(2..=MAX_RESOLUTION).contains(&res) || !(2..=MAX_RESOLUTION).contains(&dres) || m > 4096 {
        return Err(Error::Checkpoint(format!(
            "implausible shape R={res} R_d={dres} m={m}"
        )));
    }
    let bg = r.f32s(3)?;
    let step = r.u64()?;
    let flags = r.u32()?;
    let (res, dres, m) = (res as usize, dres as usize, m as usize);
    let grid_len = res.pow(3) * RadianceGrid::CHANNELS;
    let basis_len = dres.pow(3) * m * 3;
    let grid = RadianceGrid {
        resolution: res,
        params: r.f32s(grid_len)?,
    };
    let basis = DeformationBasis {
        resolution: dres,
        count: m,
        weights: r.f32s(basis_len)?,
    };
    let mut optimizer = AdamState {
        step,
        ..AdamState::default()
    };
    if flags & 1 == 1 {
        optimizer.grid_m = r.f32s(grid_len)?;
        optimizer.grid_v = r.f32s(grid_len)?;
        optimizer.basis_m = r.f32s(basis_len)?;
        optimizer.basis_v = r.f32s(basis_len)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let model = AvatarModel {
        grid,
        basis,
        background: [bg[0], bg[1], bg[2]],
    };
    model.check_finite()?;
    Ok(AvatarState { model, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> AvatarState {
        let mut model = AvatarModel::new(5, 3, 2);
        model.grid = RadianceGrid::from_fn(5, |p| (p[0] * 2.5, [p[1], 0.25, -p[2]]));
        model.basis = DeformationBasis::from_fn(3, 2, |k, p| [0.5 * k as f64, p[0], -0.125]);
        model.background = [0.0, 0.5, 1.0];
        AvatarState::new(model)
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avfg");
        let mut state = sample_state();
        for v in state
            .model
            .grid
            .params
            .iter_mut()
            .chain(&mut state.model.basis.weights)
        {
            *v = *v as f32 as f64;
        }
        state.optimizer.step = 17;
        let n = state.model.grid.params.len();
        let b = state.model.basis.weights.len();
        state.optimizer.grid_m = vec![0.5; n];
        state.optimizer.grid_v = vec![0.25; n];
        state.optimizer.basis_m = vec![-1.0; b];
        state.optimizer.basis_v = vec![2.0; b];
        save_checkpoint(&path, &state).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
    }

    #[test]
    fn header_is_little_endian_and_versioned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avfg");
        save_checkpoint(&path, &sample_state()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AVFG");
        assert_eq!(
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
            CHECKPOINT_VERSION
        );
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), HEADER_LEN + 4 * (125 * 4 + 27 * 2 * 3));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avfg");
        save_checkpoint(&path, &sample_state()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
