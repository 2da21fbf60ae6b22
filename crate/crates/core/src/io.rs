//! Field dumps, cycle reports and run manifests.
//!
//! CSV field layout: the line `nx,ny,dx,dy`, a line with those four values,
//! then `nx` lines of `ny` values each (x is the row index). Values are
//! written in shortest round-trip form, so reading a dump gives the field
//! back bit for bit.
//!
//! PGM dumps are binary 16-bit greymaps, min-max scaled, with the scale in a
//! `# scale min=… max=…` comment. The image is `nx` wide and `ny` high with
//! `y` increasing upward, so the top row is `j = ny − 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::assimilation::{CycleReport, ExperimentSink, Streams};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grid::{Ensemble, FieldBlock, Grid, ModelState, COMPARTMENTS};

const CSV_HEADER: &str = "nx,ny,dx,dy";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Field as CSV text.
pub fn field_to_csv(field: &FieldBlock<f64>, grid: &Grid<f64>) -> Result<String> {
    grid.check(field)?;
    let (nx, ny) = grid.shape();
    let mut out = String::with_capacity(nx * ny * 12);
    let _ = writeln!(out, "{CSV_HEADER}");
    let _ = writeln!(out, "{nx},{ny},{:?},{:?}", grid.dx(), grid.dy());
    for i in 0..nx {
        for j in 0..ny {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:?}", field.get(i, j));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses CSV text written by [`field_to_csv`]; `source` names it in errors.
pub fn field_from_csv(text: &str, source: &Path) -> Result<(FieldBlock<f64>, Grid<f64>)> {
    let bad = |reason: String| Error::format(source, reason);
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(bad(format!(
                "line 1: expected {CSV_HEADER:?}, got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let dims = lines.next().ok_or_else(|| bad("line 2: missing grid line".into()))?;
    let parts: Vec<&str> = dims.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(bad(format!("line 2: expected 4 values, got {}", parts.len())));
    }
    let nx: usize = parts[0]
        .parse()
        .map_err(|_| bad(format!("line 2: bad nx {:?}", parts[0])))?;
    let ny: usize = parts[1]
        .parse()
        .map_err(|_| bad(format!("line 2: bad ny {:?}", parts[1])))?;
    let dx: f64 = parts[2]
        .parse()
        .map_err(|_| bad(format!("line 2: bad dx {:?}", parts[2])))?;
    let dy: f64 = parts[3]
        .parse()
        .map_err(|_| bad(format!("line 2: bad dy {:?}", parts[3])))?;
    let grid = Grid::new(nx, ny, dx, dy)?;

    let mut values = ndarray::Array2::zeros((nx, ny));
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 3;
        if rows == nx {
            return Err(bad(format!("line {lineno}: more than {nx} rows")));
        }
        let mut count = 0;
        for (j, tok) in line.split(',').enumerate() {
            if j >= ny {
                return Err(bad(format!("line {lineno}: more than {ny} values")));
            }
            values[[rows, j]] = tok
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("line {lineno}: bad value {tok:?}")))?;
            count += 1;
        }
        if count != ny {
            return Err(bad(format!("line {lineno}: expected {ny} values, got {count}")));
        }
        rows += 1;
    }
    if rows != nx {
        return Err(bad(format!("expected {nx} rows, got {rows}")));
    }
    let field = FieldBlock::from_array(values).map_err(|_| bad("non-finite value".into()))?;
    Ok((field, grid))
}

pub fn write_field(field: &FieldBlock<f64>, grid: &Grid<f64>, path: &Path) -> Result<()> {
    write_file(path, field_to_csv(field, grid)?.as_bytes())
}

pub fn read_field(path: &Path) -> Result<(FieldBlock<f64>, Grid<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    field_from_csv(&text, path)
}

/// Field as a 16-bit binary PGM image.
pub fn field_to_pgm(field: &FieldBlock<f64>) -> Vec<u8> {
    let (nx, ny) = field.shape();
    let (lo, hi) = (field.min(), field.max());
    let mut out = format!("P5\n# scale min={lo:?} max={hi:?}\n{nx} {ny}\n65535\n").into_bytes();
    out.reserve(2 * nx * ny);
    let span = hi - lo;
    for j in (0..ny).rev() {
        for i in 0..nx {
            let level = if span > 0.0 {
                ((field.get(i, j) - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            out.extend_from_slice(&level.to_be_bytes());
        }
    }
    out
}

pub fn write_pgm(field: &FieldBlock<f64>, path: &Path) -> Result<()> {
    write_file(path, &field_to_pgm(field))
}

/// One line per cycle; wall-clock times are left to the manifest so report
/// files are reproducible.
pub fn reports_to_csv(reports: &[CycleReport]) -> String {
    let mut out = String::from(
        "cycle,time,variant,rmse_forecast,rmse_analysis,centroid_error_forecast_km,\
         centroid_error_analysis_km,centroid_shift_km,variance_absolute,variance_position,\
         variance_amplitude,warnings\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:?},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            r.cycle,
            r.time,
            r.variant,
            r.rmse_forecast,
            r.rmse_analysis,
            r.centroid_error_forecast,
            r.centroid_error_analysis,
            r.centroid_shift,
            r.variances.absolute,
            r.variances.position,
            r.variances.amplitude,
            r.warnings.len()
        );
    }
    out
}

/// Everything needed to rerun an experiment and find its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    /// Seeds are written as decimal strings: TOML integers stop at `i64::MAX`.
    #[serde(serialize_with = "seed_string")]
    pub master_seed: u64,
    pub lanes: usize,
    /// Named stream seeds, all derived from the master seed.
    #[serde(serialize_with = "seed_strings")]
    pub streams: Vec<(String, u64)>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: Vec<(String, f64)>,
    pub warnings: Vec<String>,
    /// The full configuration as TOML.
    pub config: String,
}

fn seed_string<S: serde::Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&seed.to_string())
}

fn seed_strings<S: serde::Serializer>(seeds: &[(String, u64)], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(seeds.iter().map(|(name, seed)| (name, seed.to_string())))
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        let streams = Streams::new(config.ensemble.seed, config.ensemble.n_ensemble);
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seed: config.ensemble.seed,
            lanes: config.ensemble.lanes,
            streams: streams.seeds(config.ensemble.n_cycles),
            outputs: Vec::new(),
            timings: Vec::new(),
            warnings: Vec::new(),
            config: config.to_toml(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always representable in TOML")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }
}

/// Writes fields into an output directory and records what it wrote.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    grid: Grid<f64>,
    pub written: Vec<String>,
}

impl OutputDir {
    pub fn new(root: &Path, grid: Grid<f64>) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            grid,
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        write_file(&self.root.join(rel), text.as_bytes())?;
        self.written.push(rel.to_string());
        Ok(())
    }

    /// `<stem>.csv` and `<stem>.pgm`.
    pub fn field(&mut self, stem: &str, field: &FieldBlock<f64>) -> Result<()> {
        let csv = format!("{stem}.csv");
        write_field(field, &self.grid, &self.root.join(&csv))?;
        self.written.push(csv);
        let pgm = format!("{stem}.pgm");
        write_pgm(field, &self.root.join(&pgm))?;
        self.written.push(pgm);
        Ok(())
    }

    /// One CSV/PGM pair per compartment, `<stem>_S` etc.
    pub fn state(&mut self, stem: &str, state: &ModelState<f64>) -> Result<()> {
        for (name, block) in COMPARTMENTS.iter().zip([state.s(), state.i(), state.r()]) {
            self.field(&format!("{stem}_{name}"), block)?;
        }
        Ok(())
    }
}

/// [`ExperimentSink`] that dumps spinup states and per-cycle fields and
/// rewrites `report.csv` after every cycle.
#[derive(Debug)]
pub struct DumpSink {
    pub out: OutputDir,
    pub reports: Vec<CycleReport>,
}

impl DumpSink {
    pub fn new(out: OutputDir) -> Self {
        DumpSink {
            out,
            reports: Vec::new(),
        }
    }
}

impl ExperimentSink for DumpSink {
    fn spinup(&mut self, ensemble: &Ensemble<ModelState<f64>>, truth_frames: &[FieldBlock<f64>]) -> Result<()> {
        for (k, m) in ensemble.members.iter().enumerate() {
            self.out.field(&format!("spinup/member-{}_I", k + 1), m.i())?;
        }
        if let Some(r) = &ensemble.reference {
            self.out.field("spinup/reference_I", r.i())?;
        }
        if let Some(d) = truth_frames.first() {
            self.out.field("spinup/truth_I", d)?;
        }
        self.out.write_text("report.csv", &reports_to_csv(&self.reports))
    }

    fn cycle(&mut self, report: &CycleReport) -> Result<()> {
        let dir = format!("cycle-{}", report.cycle);
        self.out.state(&format!("{dir}/forecast_mean"), &report.forecast_mean)?;
        self.out.field(&format!("{dir}/data_I"), &report.data)?;
        self.out.state(&format!("{dir}/analysis_mean"), &report.analysis_mean)?;
        self.reports.push(report.clone());
        let text = reports_to_csv(&self.reports);
        write_file(&self.out.root().join("report.csv"), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = Grid::new(7, 5, 2.5, 0.1).unwrap();
        let mut rng = RandomStream::from_seed(3);
        let f = FieldBlock::from_fn(7, 5, |_| {
            rng.standard_normal() * 10f64.powi((rng.uniform() * 40.0) as i32 - 20)
        });
        let text = field_to_csv(&f, &g).unwrap();
        let (back, g2) = field_from_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(g2, g);
        for (a, b) in f.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_errors() {
        let p = Path::new("x.csv");
        assert!(matches!(field_from_csv("", p), Err(Error::Format { .. })));
        assert!(matches!(
            field_from_csv("nx,ny,dx,dy\n4,4,1\n", p),
            Err(Error::Format { .. })
        ));
        let short = "nx,ny,dx,dy\n4,4,1,1\n0,0,0,0\n";
        let e = field_from_csv(short, p).unwrap_err();
        assert!(e.to_string().contains("expected 4 rows"), "{e}");
        let bad = "nx,ny,dx,dy\n4,4,1,1\n0,0,0,0\n0,0,x,0\n0,0,0,0\n0,0,0,0\n";
        let e = field_from_csv(bad, p).unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
    }

    #[test]
    fn pgm_layout() {
        let f = FieldBlock::from_fn(4, 4, |(i, j)| (i + 4 * j) as f64);
        let bytes = field_to_pgm(&f);
        let header = b"P5\n# scale min=0.0 max=15.0\n4 4\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 32);
        // first pixel is (0, 3) = 12 of 15
        assert_eq!(u16::from_be_bytes([px[0], px[1]]), 52428);
        // last pixel is (3, 0) = 3 of 15
        assert_eq!(u16::from_be_bytes([px[30], px[31]]), 13107);
        let flat = field_to_pgm(&FieldBlock::constant(4, 4, 7.0));
        assert!(flat[flat.len() - 32..].iter().all(|&b| b == 0));
    }
}
