use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{
    BatchNormParams, FcParams, FelParams, Fusion, HeadParams, LayerKind, NetworkParams,
    RouteParams, Routes,
};
use crate::numerics::{Matrix, RunningStats};

const MAGIC: &[u8; 8] = b"PCSTYLE\0";
const VERSION: u32 = 1;

/// Saves network parameters to a self-describing binary checkpoint:
/// magic, version, architecture flags and widths, class names, then
/// row-major little-endian f64 parameter blocks. Written via a sibling
/// temp file and renamed, so failures never leave a partial checkpoint.
pub fn save_params(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = write_checkpoint(params, &tmp)
        .and_then(|()| fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn write_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer {
        inner: BufWriter::new(file),
        path,
    };

    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(match params.fusion() {
        Fusion::Late => 0,
        Fusion::Early => 1,
    })?;
    w.u8(match params.layer_kind {
        LayerKind::Fel => 0,
        LayerKind::SharedFc => 1,
    })?;
    w.f64(params.leaky_slope)?;
    w.u32(params.class_count as u32)?;
    for &width in &params.layer_widths {
        w.u32(width as u32)?;
    }
    for &width in &params.head_widths {
        w.u32(width as u32)?;
    }
    w.u32(params.class_names.len() as u32)?;
    for name in &params.class_names {
        let bytes = name.as_bytes();
        w.u32(bytes.len() as u32)?;
        w.bytes(bytes)?;
    }

    let routes: Vec<&RouteParams> = match &params.routes {
        Routes::Late { geometry, color } => vec![geometry, color],
        Routes::Early { fused } => vec![fused],
    };
    for route in routes {
        for fel in &route.layers {
            w.matrix(&fel.weight)?;
            w.matrix(&fel.bias)?;
            w.bn(&fel.bn)?;
        }
    }
    for fc in &params.head.fc {
        w.matrix(&fc.weight)?;
        w.matrix(&fc.bias)?;
    }
    for bn in &params.head.bn {
        w.bn(bn)?;
    }
    w.inner.flush().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written by [`save_params`], validating the magic,
/// version, and structural widths.
pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic = r.bytes(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a pcstyle checkpoint",
            &magic[..magic.len().min(8)]
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let fusion = match r.u8()? {
        0 => Fusion::Late,
        1 => Fusion::Early,
        other => return Err(Error::Checkpoint(format!("invalid fusion flag {other}"))),
    };
    let layer_kind = match r.u8()? {
        0 => LayerKind::Fel,
        1 => LayerKind::SharedFc,
        other => return Err(Error::Checkpoint(format!("invalid layer kind flag {other}"))),
    };
    let leaky_slope = r.f64()?;
    let class_count = r.u32()? as usize;
    let mut layer_widths = [0usize; 4];
    for width in &mut layer_widths {
        *width = r.u32()? as usize;
    }
    let mut head_widths = [0usize; 2];
    for width in &mut head_widths {
        *width = r.u32()? as usize;
    }
    let name_count = r.u32()? as usize;
    if name_count != class_count {
        return Err(Error::Checkpoint(format!(
            "checkpoint declares {class_count} classes but {name_count} names"
        )));
    }
    let mut class_names = Vec::with_capacity(name_count);
    for _ in 0..name_count {
        let len = r.u32()? as usize;
        if len > 4096 {
            return Err(Error::Checkpoint("class name too long".into()));
        }
        let bytes = r.bytes(len)?;
        class_names.push(
            String::from_utf8(bytes)
                .map_err(|_| Error::Checkpoint("class name is not valid UTF-8".into()))?,
        );
    }

    let read_route = |r: &mut Reader<BufReader<fs::File>>| -> Result<RouteParams> {
        let mut layers = Vec::with_capacity(4);
        for _ in 0..4 {
            let weight = r.matrix()?;
            let bias = r.matrix()?;
            let bn = r.bn()?;
            layers.push(FelParams { weight, bias, bn });
        }
        Ok(RouteParams {
            layers: layers.try_into().expect("exactly 4 layers"),
        })
    };

    let routes = match fusion {
        Fusion::Late => Routes::Late {
            geometry: read_route(&mut r)?,
            color: read_route(&mut r)?,
        },
        Fusion::Early => Routes::Early {
            fused: read_route(&mut r)?,
        },
    };

    let mut fcs = Vec::with_capacity(3);
    for _ in 0..3 {
        let weight = r.matrix()?;
        let bias = r.matrix()?;
        fcs.push(FcParams { weight, bias });
    }
    let bn1 = r.bn()?;
    let bn2 = r.bn()?;

    if !r.at_eof()? {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }

    let params = NetworkParams {
        routes,
        head: HeadParams {
            fc: fcs.try_into().expect("exactly 3 layers"),
            bn: [bn1, bn2],
        },
        layer_widths,
        head_widths,
        class_count,
        layer_kind,
        leaky_slope,
        class_names,
    };
    params.validate()?;
    Ok(params)
}

struct Writer<'a, W: Write> {
    inner: W,
    path: &'a Path,
}

impl<W: Write> Writer<'_, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.u32(m.rows() as u32)?;
        self.u32(m.cols() as u32)?;
        for &v in m.data() {
            self.f64(v)?;
        }
        Ok(())
    }

    fn bn(&mut self, bn: &BatchNormParams) -> Result<()> {
        self.matrix(&bn.gamma)?;
        self.matrix(&bn.beta)?;
        self.u32(bn.stats.mean.len() as u32)?;
        for &v in &bn.stats.mean {
            self.f64(v)?;
        }
        for &v in &bn.stats.var {
            self.f64(v)?;
        }
        self.u8(bn.stats.ready as u8)
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows.saturating_mul(cols) > 1 << 28 {
            return Err(Error::Checkpoint(format!(
                "implausible matrix size {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    fn bn(&mut self) -> Result<BatchNormParams> {
        let gamma = self.matrix()?;
        let beta = self.matrix()?;
        let width = self.u32()? as usize;
        if width > 1 << 24 {
            return Err(Error::Checkpoint("implausible stats width".into()));
        }
        let mut mean = Vec::with_capacity(width);
        for _ in 0..width {
            mean.push(self.f64()?);
        }
        let mut var = Vec::with_capacity(width);
        for _ in 0..width {
            var.push(self.f64()?);
        }
        let ready = self.u8()? != 0;
        Ok(BatchNormParams {
            gamma,
            beta,
            stats: RunningStats { mean, var, ready },
        })
    }

    fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) => Err(Error::Checkpoint(format!("read error near end: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{classify, warm_running_stats, NetworkConfig};
    use crate::pointcloud::ColoredPointCloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> ColoredPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions =
            Matrix::from_raw(n, 3, (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect());
        let colors =
            Matrix::from_raw(n, 3, (0..n * 3).map(|_| rng.random_range(0.0..255.0)).collect());
        ColoredPointCloud::new(positions, colors)
            .unwrap()
            .normalize()
            .unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_outputs_bitwise() {
        let mut params = NetworkParams::init(&NetworkConfig::desk(3)).unwrap();
        let a = random_cloud(16, 1);
        let b = random_cloud(16, 2);
        warm_running_stats(&mut params, &[&a, &b]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();

        assert_eq!(loaded, params);
        let probe = random_cloud(10, 3);
        assert_eq!(
            classify(&probe, &params).unwrap(),
            classify(&probe, &loaded).unwrap()
        );
    }

    #[test]
    fn checkpoint_preserves_mode_flags() {
        let mut config = NetworkConfig::desk(2);
        config.fusion = Fusion::Early;
        config.layer_kind = LayerKind::SharedFc;
        let params = NetworkParams::init(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flags.ckpt");
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.fusion(), Fusion::Early);
        assert_eq!(loaded.layer_kind, LayerKind::SharedFc);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let params = NetworkParams::init(&NetworkConfig::desk(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        save_params(&params, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_params(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_widths_give_descriptive_error() {
        let params = NetworkParams::init(&NetworkConfig::desk(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("widths.ckpt");
        save_params(&params, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Patch the first layer width field (magic 8 + version 4 + flags 2 +
        // slope 8 + class_count 4 = offset 26).
        bytes[26] = 99;
        fs::write(&path, &bytes).unwrap();
        match load_params(&path) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("weight") || msg.contains("width"), "{msg}")
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Checkpoint(_))));
    }
}
