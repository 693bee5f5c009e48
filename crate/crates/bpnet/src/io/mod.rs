//! File formats: PFM depth maps, PGM previews, CSV for sparse points,
//! metrics, sweeps and loss curves, and TOML configuration loading.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::harness::{AblationRow, SweepRow};
use crate::metrics::{MetricReport, M_TO_KM_INV};
use crate::pipeline::PipelineConfig;
use crate::sparse::SparseDepthMap;
use crate::{BpError, Result};

pub const CONFIG_ENV: &str = "BPDEPTH_CONFIG";

/// Grayscale little-endian PFM (`Pf`, scale -1.0). Data is stored
/// bottom-up per the format; this API works in row-major top-down grids.
pub fn write_pfm(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(BpError::ShapeMismatch {
            op: "write_pfm",
            lhs: vec![h, w],
            rhs: vec![data.len()],
        });
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "Pf\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            f.write_all(&(data[y * w + x] as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Color little-endian PFM (`PF`) from planar `[3, h, w]` data.
pub fn write_pfm_color(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    if data.len() != 3 * h * w {
        return Err(BpError::ShapeMismatch {
            op: "write_pfm_color",
            lhs: vec![3, h, w],
            rhs: vec![data.len()],
        });
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "PF\n{w} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..3 {
                f.write_all(&(data[c * h * w + y * w + x] as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a PFM as a planar 3-channel image; grayscale input is replicated.
pub fn read_pfm_image(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let (planar, channels, h, w) = read_pfm_raw(path)?;
    if channels == 3 {
        return Ok((planar, h, w));
    }
    let mut out = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        out.extend_from_slice(&planar);
    }
    Ok((out, h, w))
}

fn read_token(r: &mut impl Read) -> Result<String> {
    let mut tok = Vec::new();
    let mut b = [0u8; 1];
    loop {
        r.read_exact(&mut b)?;
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    String::from_utf8(tok).map_err(|_| BpError::Format("non-ascii PFM header".into()))
}

/// Read a grayscale or color PFM; color maps are averaged to one channel.
pub fn read_pfm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let (planar, channels, h, w) = read_pfm_raw(path)?;
    if channels == 1 {
        return Ok((planar, h, w));
    }
    let mut out = vec![0.0f64; h * w];
    for c in 0..channels {
        for (o, v) in out.iter_mut().zip(&planar[c * h * w..(c + 1) * h * w]) {
            *o += v / channels as f64;
        }
    }
    Ok((out, h, w))
}

fn read_pfm_raw(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => {
            return Err(BpError::Format(format!(
                "{}: bad PFM magic {other:?}",
                path.display()
            )))
        }
    };
    let parse = |t: String| -> Result<f64> {
        t.parse()
            .map_err(|_| BpError::Format(format!("bad PFM header token {t:?}")))
    };
    let w = parse(read_token(&mut r)?)? as usize;
    let h = parse(read_token(&mut r)?)? as usize;
    let scale = parse(read_token(&mut r)?)?;
    if w == 0 || h == 0 {
        return Err(BpError::Format("empty PFM extents".into()));
    }
    let little = scale < 0.0;
    let mut buf = vec![0u8; h * w * channels * 4];
    r.read_exact(&mut buf)?;
    let mut out = vec![0.0f64; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = ((h - 1 - y) * w + x) * channels * 4;
            for c in 0..channels {
                let b: [u8; 4] = buf[i + c * 4..i + c * 4 + 4].try_into().unwrap();
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                out[c * h * w + y * w + x] = v as f64;
            }
        }
    }
    Ok((out, channels, h, w))
}

/// 8-bit PGM preview, min-max normalized to 0..255.
pub fn write_pgm_preview(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w {
        return Err(BpError::ShapeMismatch {
            op: "write_pgm_preview",
            lhs: vec![h, w],
            rhs: vec![data.len()],
        });
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Sparse points CSV with an `x,y,depth_m` header; coordinates are pixel
/// indices and depths must be positive.
pub fn write_sparse_csv(path: &Path, map: &SparseDepthMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "x,y,depth_m")?;
    for y in 0..map.height {
        for x in 0..map.width {
            let d = map.depth[y * map.width + x];
            if d > 0.0 {
                writeln!(f, "{x},{y},{d}")?;
            }
        }
    }
    Ok(())
}

pub fn read_sparse_csv(path: &Path, h: usize, w: usize) -> Result<SparseDepthMap> {
    let f = BufReader::new(File::open(path)?);
    let mut depth = vec![0.0f64; h * w];
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| BpError::Format(format!("{}: empty file", path.display())))??;
    if header.trim() != "x,y,depth_m" {
        return Err(BpError::Format(format!(
            "{}: expected header x,y,depth_m, got {header:?}",
            path.display()
        )));
    }
    for (ln, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let bad = |what: &str| {
            BpError::Format(format!("{}: line {}: {what}", path.display(), ln + 2))
        };
        let x: usize = it
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| bad("bad x"))?;
        let y: usize = it
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| bad("bad y"))?;
        let d: f64 = it
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| bad("bad depth"))?;
        if it.next().is_some() {
            return Err(bad("trailing fields"));
        }
        if x >= w || y >= h {
            return Err(bad("coordinates outside the grid"));
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(bad("depth must be positive and finite"));
        }
        depth[y * w + x] = d;
    }
    SparseDepthMap::from_depth(depth, h, w)
}

/// Load a configuration from an explicit path, falling back to the
/// `BPDEPTH_CONFIG` environment variable, then to defaults.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let owned;
    let path = match path {
        Some(p) => Some(p),
        None => match std::env::var(CONFIG_ENV) {
            Ok(p) => {
                owned = std::path::PathBuf::from(p);
                Some(owned.as_path())
            }
            Err(_) => None,
        },
    };
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| BpError::Format(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_loss_csv(path: &Path, history: &[(usize, f64)]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "step,loss")?;
    for (step, loss) in history {
        writeln!(f, "{step},{loss:.17e}")?;
    }
    Ok(())
}

fn metric_columns() -> &'static str {
    "rmse,mae,irmse_per_km,imae_per_km,rel,delta1,delta2,delta3,n_valid"
}

fn metric_values(r: &MetricReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.rmse,
        r.mae,
        r.irmse * M_TO_KM_INV,
        r.imae * M_TO_KM_INV,
        r.rel,
        r.deltas.first().copied().unwrap_or(f64::NAN),
        r.deltas.get(1).copied().unwrap_or(f64::NAN),
        r.deltas.get(2).copied().unwrap_or(f64::NAN),
        r.n_valid
    )
}

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", metric_columns())?;
    writeln!(f, "{}", metric_values(report))?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "count,status,{},rmse_std,mae_std,n_samples", metric_columns())?;
    for row in rows {
        match &row.mean {
            Some(m) => writeln!(
                f,
                "{},ok,{},{},{},{}",
                row.count,
                metric_values(m),
                row.std_rmse,
                row.std_mae,
                row.n_samples
            )?,
            None => writeln!(
                f,
                "{},skipped_insufficient_points,,,,,,,,,,,0",
                row.count
            )?,
        }
    }
    Ok(())
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "label,ablation,pre,mf,post,params,madds,{}", metric_columns())?;
    for r in rows {
        writeln!(
            f,
            "{},{:?},{},{},{},{},{},{}",
            r.label,
            r.ablation,
            r.pre,
            r.mf,
            r.post,
            r.param_count,
            r.madds,
            metric_values(&r.metrics)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 + 0.25).collect();
        write_pfm(&p, &data, 3, 4).unwrap();
        let (back, h, w) = read_pfm(&p).unwrap();
        assert_eq!((h, w), (3, 4));
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn color_pfm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img.pfm");
        let data: Vec<f64> = (0..3 * 6).map(|i| i as f64 / 7.0).collect();
        write_pfm_color(&p, &data, 2, 3).unwrap();
        let (back, h, w) = read_pfm_image(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        // grayscale read averages the channels
        let (gray, _, _) = read_pfm(&p).unwrap();
        assert!((gray[0] - (data[0] + data[6] + data[12]) / 3.0).abs() < 1e-6);
    }

    #[test]
    fn sparse_csv_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut depth = vec![0.0; 20];
        depth[3] = 1.5;
        depth[17] = 4.25;
        let map = SparseDepthMap::from_depth(depth, 4, 5).unwrap();
        write_sparse_csv(&p, &map).unwrap();
        let back = read_sparse_csv(&p, 4, 5).unwrap();
        assert_eq!(back.depth, map.depth);
        assert_eq!(back.count, 2);
    }

    #[test]
    fn sparse_csv_rejects_bad_rows() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        for body in [
            "x,y\n",
            "x,y,depth_m\n9,0,1.0\n",
            "x,y,depth_m\n0,0,-2.0\n",
            "x,y,depth_m\n0,zero,1.0\n",
        ] {
            std::fs::write(&p, body).unwrap();
            assert!(read_sparse_csv(&p, 4, 5).is_err(), "accepted {body:?}");
        }
    }

    #[test]
    fn config_loads_from_toml() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "scales = 2\nwidths = [4, 8]\nn_points = 40\n").unwrap();
        let cfg = load_config(Some(&p)).unwrap();
        assert_eq!(cfg.scales, 2);
        assert_eq!(cfg.widths, vec![4, 8]);
        assert_eq!(cfg.n_points, 40);
        // untouched fields keep their defaults
        assert_eq!(cfg.kernels, vec![3, 5, 7]);
        assert!(load_config(Some(&dir.path().join("missing.toml"))).is_err());
        std::fs::write(&p, "scales = 2\nwidths = [4]\n").unwrap();
        assert!(load_config(Some(&p)).is_err());
        std::fs::write(&p, "unknown_field = 1\n").unwrap();
        assert!(load_config(Some(&p)).is_err());
    }

    #[test]
    fn pgm_preview_has_header_and_payload() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        write_pgm_preview(&p, &[0.0, 1.0, 2.0, 3.0], 2, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes[bytes.len() - 1], 255);
    }
}
