//! Single-file checkpoint format: magic `SWT1`, a length-prefixed UTF-8
//! text header (config, layout, ranks, run record, tensor directory), then
//! the payload of concatenated little-endian f32 tensors in directory
//! order. Writing is byte-deterministic; offsets are validated to be
//! strictly increasing and to tile the payload exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SweetError};
use crate::params::ParamSet;
use crate::tensor::DenseTensor;
use crate::vit::ViTConfig;

pub const CKPT_MAGIC: &[u8; 4] = b"SWT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Template + scalers + direct params.
    Template,
    /// Materialized standalone model.
    Model,
}

impl CheckpointKind {
    fn as_str(&self) -> &'static str {
        match self {
            CheckpointKind::Template => "template",
            CheckpointKind::Model => "model",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(CheckpointKind::Template),
            "model" => Ok(CheckpointKind::Model),
            other => Err(SweetError::Format {
                offset: 0,
                message: format!("unknown checkpoint kind {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ViTConfig,
    /// (r1, r2, r3) for template checkpoints.
    pub ranks: Option<(usize, usize, usize)>,
    /// Resolved run configuration echoed into the artifact.
    pub run: Vec<(String, String)>,
    /// Named tensors in directory order.
    pub tensors: ParamSet,
}

fn cfg_lines(cfg: &ViTConfig, out: &mut String) {
    use std::fmt::Write as _;
    let _ = writeln!(out, "[model]");
    let _ = writeln!(out, "layers={}", cfg.layers);
    let _ = writeln!(out, "heads={}", cfg.heads);
    let _ = writeln!(out, "head_dim={}", cfg.head_dim);
    let _ = writeln!(out, "embed_dim={}", cfg.embed_dim);
    let _ = writeln!(out, "mlp_dim={}", cfg.mlp_dim);
    let _ = writeln!(out, "patch={}", cfg.patch);
    let _ = writeln!(out, "image={}", cfg.image);
    let _ = writeln!(out, "channels={}", cfg.channels);
    let _ = writeln!(out, "swiglu={}", cfg.swiglu as u8);
    let _ = writeln!(out, "rmsnorm={}", cfg.rmsnorm as u8);
    let _ = writeln!(out, "rope={}", cfg.rope as u8);
    let _ = writeln!(out, "dec_depth={}", cfg.dec_depth);
    let _ = writeln!(out, "dec_dim={}", cfg.dec_dim);
    let _ = writeln!(out, "dec_heads={}", cfg.dec_heads);
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut header = String::new();
        let _ = writeln!(header, "format_version={FORMAT_VERSION}");
        let _ = writeln!(header, "kind={}", self.kind.as_str());
        cfg_lines(&self.config, &mut header);
        if self.config.layers > 0 {
            let layout = self.config.layout()?;
            let _ = writeln!(header, "[layout]");
            let _ = writeln!(header, "slices_per_layer={}", layout.slices_per_layer);
            let _ = writeln!(header, "total_slices={}", layout.total_slices());
        }
        if let Some((r1, r2, r3)) = self.ranks {
            let _ = writeln!(header, "[ranks]");
            let _ = writeln!(header, "r1={r1}");
            let _ = writeln!(header, "r2={r2}");
            let _ = writeln!(header, "r3={r3}");
        }
        let _ = writeln!(header, "[run]");
        for (k, v) in &self.run {
            let _ = writeln!(header, "{k}={v}");
        }
        let _ = writeln!(header, "[tensors]");
        let mut offset = 0u64;
        for (name, t) in self.tensors.iter() {
            let byte_len = t.len() as u64 * 4;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "{name} f32 {} {offset} {byte_len}", dims.join(","));
            offset += byte_len;
        }

        let file = File::create(path).map_err(|e| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let io_err = |e: std::io::Error| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(file);
        w.write_all(CKPT_MAGIC).map_err(io_err)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(header.as_bytes()).map_err(io_err)?;
        for (_, t) in self.tensors.iter() {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file = File::open(path).map_err(|e| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(|_| SweetError::Format {
            offset: 0,
            message: "file too short for magic".into(),
        })?;
        if &magic != CKPT_MAGIC {
            return Err(SweetError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected SWT1"),
            });
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes).map_err(|_| SweetError::Format {
            offset: 4,
            message: "truncated header length".into(),
        })?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes).map_err(|_| SweetError::Format {
            offset: 8,
            message: format!("truncated header, expected {header_len} bytes"),
        })?;
        let header = String::from_utf8(header_bytes).map_err(|e| SweetError::Format {
            offset: 8,
            message: format!("header is not UTF-8: {e}"),
        })?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload).map_err(|e| SweetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        parse_checkpoint(&header, &payload, 8 + header_len as u64)
    }
}

fn parse_checkpoint(header: &str, payload: &[u8], payload_base: u64) -> Result<Checkpoint> {
    let mut kind = None;
    let mut version = None;
    let mut section = String::new();
    let mut model: Vec<(String, String)> = Vec::new();
    let mut ranks_kv: Vec<(String, usize)> = Vec::new();
    let mut run: Vec<(String, String)> = Vec::new();
    let mut dir: Vec<(String, Vec<usize>, u64, u64)> = Vec::new();

    let fmt_err = |message: String| SweetError::Format { offset: 8, message };

    for line in header.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].to_string();
            continue;
        }
        if section == "tensors" {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 {
                return Err(fmt_err(format!("bad tensor directory line: {line}")));
            }
            if parts[1] != "f32" {
                return Err(fmt_err(format!("unsupported dtype {}", parts[1])));
            }
            let shape: Vec<usize> = parts[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fmt_err(format!("bad shape in {line}: {e}")))?;
            let offset: u64 = parts[3]
                .parse()
                .map_err(|e| fmt_err(format!("bad offset in {line}: {e}")))?;
            let byte_len: u64 = parts[4]
                .parse()
                .map_err(|e| fmt_err(format!("bad length in {line}: {e}")))?;
            dir.push((parts[0].to_string(), shape, offset, byte_len));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("expected key=value, got {line}")))?;
        match section.as_str() {
            "" => match k {
                "format_version" => {
                    version = Some(v.parse::<u32>().map_err(|e| fmt_err(e.to_string()))?)
                }
                "kind" => kind = Some(CheckpointKind::parse(v)?),
                other => return Err(fmt_err(format!("unknown top-level key {other}"))),
            },
            "model" => model.push((k.to_string(), v.to_string())),
            "layout" => {} // derived from the model section
            "ranks" => ranks_kv.push((
                k.to_string(),
                v.parse::<usize>().map_err(|e| fmt_err(e.to_string()))?,
            )),
            "run" => run.push((k.to_string(), v.to_string())),
            other => return Err(fmt_err(format!("unknown section [{other}]"))),
        }
    }

    if version != Some(FORMAT_VERSION) {
        return Err(fmt_err(format!(
            "unsupported format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let kind = kind.ok_or_else(|| fmt_err("missing kind".into()))?;

    let get = |key: &str| -> Result<usize> {
        model
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| fmt_err(format!("missing model key {key}")))?
            .1
            .parse::<usize>()
            .map_err(|e| fmt_err(format!("bad model key {key}: {e}")))
    };
    let mut config = ViTConfig::new(
        get("layers")?,
        get("heads")?,
        get("head_dim")?,
        get("patch")?,
        get("image")?,
        get("channels")?,
    )?
    .with_flags(get("swiglu")? != 0, get("rmsnorm")? != 0, get("rope")? != 0);
    config.dec_depth = get("dec_depth")?;
    config.dec_dim = get("dec_dim")?;
    config.dec_heads = get("dec_heads")?;
    if get("embed_dim")? != config.embed_dim || get("mlp_dim")? != config.mlp_dim {
        return Err(fmt_err("inconsistent embed/mlp dims in header".into()));
    }
    config.validate()?;

    let ranks = if ranks_kv.is_empty() {
        None
    } else {
        let pick = |key: &str| -> Result<usize> {
            ranks_kv
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| fmt_err(format!("missing rank {key}")))
        };
        Some((pick("r1")?, pick("r2")?, pick("r3")?))
    };

    // Offsets must be strictly increasing, non-overlapping, and tile the
    // payload exactly.
    let mut expected = 0u64;
    for (name, shape, offset, byte_len) in &dir {
        if *offset != expected {
            return Err(SweetError::Format {
                offset: payload_base + expected,
                message: format!("tensor {name} at offset {offset}, expected {expected}"),
            });
        }
        let n: usize = shape.iter().product();
        if n as u64 * 4 != *byte_len {
            return Err(fmt_err(format!(
                "tensor {name}: shape {shape:?} wants {} bytes, directory says {byte_len}",
                n * 4
            )));
        }
        expected += byte_len;
    }
    if expected != payload.len() as u64 {
        return Err(SweetError::Format {
            offset: payload_base + (payload.len() as u64).min(expected),
            message: format!("payload is {} bytes, directory sums to {expected}", payload.len()),
        });
    }

    let mut tensors = ParamSet::new();
    for (name, shape, offset, byte_len) in dir {
        let base = offset as usize;
        let mut data = Vec::with_capacity(byte_len as usize / 4);
        for chunk in payload[base..base + byte_len as usize].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        tensors.insert(&name, DenseTensor::new(shape, data)?)?;
    }

    Ok(Checkpoint {
        kind,
        config,
        ranks,
        run,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::DirectParams;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = ViTConfig::new(2, 2, 4, 4, 8, 1).unwrap();
        let direct = DirectParams::init(&cfg, 3).unwrap();
        let mut tensors = ParamSet::new();
        tensors
            .insert(
                "template/g",
                DenseTensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64 * 0.25).collect())
                    .unwrap(),
            )
            .unwrap();
        for (name, t) in direct.set.iter().take(3) {
            tensors.insert(&format!("direct/{name}"), t.clone()).unwrap();
        }
        Checkpoint {
            kind: CheckpointKind::Template,
            config: cfg,
            ranks: Some((2, 2, 2)),
            run: vec![("seed".into(), "42".into()), ("steps".into(), "10".into())],
            tensors,
        }
    }

    #[test]
    fn round_trip_preserves_everything_at_f32() {
        let dir = std::env::temp_dir().join("sweet_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.swt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, ck.kind);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.ranks, ck.ranks);
        assert_eq!(back.run, ck.run);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(ck.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = std::env::temp_dir().join("sweet_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("d1.swt"), dir.join("d2.swt"));
        let ck = sample_checkpoint();
        ck.save(&p1).unwrap();
        ck.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = std::env::temp_dir().join("sweet_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.swt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(SweetError::Format { offset: 0, .. })
        ));
        // Valid file with the payload chopped.
        let good = dir.join("good.swt");
        sample_checkpoint().save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let chopped = &bytes[..bytes.len() - 5];
        let trunc = dir.join("trunc.swt");
        std::fs::write(&trunc, chopped).unwrap();
        assert!(matches!(
            Checkpoint::load(&trunc),
            Err(SweetError::Format { .. })
        ));
    }
}
