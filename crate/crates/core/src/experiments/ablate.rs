use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::eval::run_evaluate;
use super::train::{final_checkpoint_path, run_train};
use crate::error::{Error, Result};
use crate::frontend::SpecAugPolicy;
use crate::transfer::TransferConfig;

pub const RESULTS_HEADER: &str = "mode,K,freeze,specaug_F,specaug_T,dev_wer,test_wer,rel_improvement";

/// Embedding SpecAug setting of a grid cell; `none` disables it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskWidths(pub Option<(usize, usize)>);

impl TryFrom<String> for MaskWidths {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(MaskWidths(None));
        }
        SpecAugPolicy::parse_widths(&s)
            .map(|p| MaskWidths(Some((p.freq_mask_width, p.time_mask_width))))
            .ok_or_else(|| format!("mask widths {s:?}: expected FxT or none"))
    }
}

impl From<MaskWidths> for String {
    fn from(m: MaskWidths) -> String {
        match m.0 {
            None => "none".into(),
            Some((f, t)) => format!("{f}x{t}"),
        }
    }
}

impl MaskWidths {
    pub fn policy(&self) -> Option<SpecAugPolicy> {
        self.0.map(|(f, t)| SpecAugPolicy::new(f, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub ks: Vec<usize>,
    pub freeze: Vec<bool>,
    pub specaug: Vec<MaskWidths>,
    /// Reference rows run alongside the grid.
    pub baseline: bool,
    pub vanilla: bool,
    pub direct: bool,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            ks: vec![2, 4, 6],
            freeze: vec![true, false],
            specaug: vec![MaskWidths(None)],
            baseline: true,
            vanilla: true,
            direct: true,
        }
    }
}

/// Ablation file: how to build the source model, the target-run template and the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Baseline-mode run on source data; trained only when its final checkpoint is absent.
    pub source: ExperimentConfig,
    /// Template for every target run; its `mode` is ignored.
    pub target: ExperimentConfig,
    #[serde(default)]
    pub grid: AblationGrid,
    pub output_dir: PathBuf,
}

impl AblationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_yaml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.mode != Mode::Baseline {
            return Err(Error::Config("source run must use mode baseline".into()));
        }
        self.source.validate()?;
        if self.grid.ks.contains(&0) {
            return Err(Error::Config("tap K must be at least 1".into()));
        }
        let depth = self.source.model.num_encoder_layers;
        if let Some(k) = self.grid.ks.iter().find(|&&k| k > depth) {
            return Err(Error::Config(format!("tap K={k} exceeds source depth {depth}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: Mode,
    pub k: Option<usize>,
    pub freeze: Option<bool>,
    pub specaug: Option<(usize, usize)>,
    pub dev_wer: Option<f64>,
    pub test_wer: Option<f64>,
    pub rel_improvement: Option<f64>,
    /// Why the cell produced no numbers.
    pub error: Option<String>,
}

impl ResultRow {
    fn new(mode: Mode) -> Self {
        ResultRow {
            mode,
            k: None,
            freeze: None,
            specaug: None,
            dev_wer: None,
            test_wer: None,
            rel_improvement: None,
            error: None,
        }
    }

    pub fn name(&self) -> String {
        let mut s = self.mode.as_str().to_string();
        if let Some(k) = self.k {
            let _ = write!(s, "_k{k}");
        }
        if let Some(f) = self.freeze {
            s.push_str(if f { "_frozen" } else { "_updated" });
        }
        if let Some((f, t)) = self.specaug {
            let _ = write!(s, "_sa{f}x{t}");
        }
        s
    }
}

/// `100 * (baseline - wer) / baseline`.
pub fn relative_improvement(baseline: f64, wer: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::invalid(format!("baseline error rate {baseline} must be positive")));
    }
    Ok(100.0 * (baseline - wer) / baseline)
}

/// Fills `rel_improvement` of every row from the baseline row's test error rate.
pub fn with_relative_improvement(rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
    let base = rows
        .iter()
        .find(|r| r.mode == Mode::Baseline)
        .ok_or_else(|| Error::invalid("results table has no baseline row"))?;
    let b = base
        .test_wer
        .ok_or_else(|| Error::invalid("baseline row has no test error rate"))?;
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.rel_improvement = r.test_wer.map(|w| relative_improvement(b, w)).transpose()?;
            Ok(r)
        })
        .collect()
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_default()
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let failed = r.error.is_some();
        let wer = |x: Option<f64>| if failed { "failed".to_string() } else { cell(x) };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.mode.as_str(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.freeze.map(|f| f.to_string()).unwrap_or_default(),
            r.specaug.map(|x| x.0.to_string()).unwrap_or_default(),
            r.specaug.map(|x| x.1.to_string()).unwrap_or_default(),
            wer(r.dev_wer),
            wer(r.test_wer),
            cell(r.rel_improvement),
        );
    }
    s
}

pub fn parse_results_csv(text: &str, path: &Path) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RESULTS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("expected header {RESULTS_HEADER}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", f.len())));
        }
        let mode = match f[0] {
            "baseline" => Mode::Baseline,
            "vanilla" => Mode::Vanilla,
            "tap" => Mode::Tap,
            "direct" => Mode::Direct,
            m => return Err(bad(format!("unknown mode {m:?}"))),
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            match s {
                "" | "failed" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(format!("not a number: {v:?}"))),
            }
        };
        let usize_opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("not a count: {s:?}")))
            }
        };
        let freeze = match f[2] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            v => return Err(bad(format!("freeze must be true/false, found {v:?}"))),
        };
        let specaug = match (usize_opt(f[3])?, usize_opt(f[4])?) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(bad("specaug_F and specaug_T must both be set or both empty".into())),
        };
        rows.push(ResultRow {
            mode,
            k: usize_opt(f[1])?,
            freeze,
            specaug,
            dev_wer: opt(f[5])?,
            test_wer: opt(f[6])?,
            rel_improvement: opt(f[7])?,
            error: (f[5] == "failed" || f[6] == "failed").then(|| "failed".to_string()),
        });
    }
    Ok(rows)
}

/// Markdown table and CSV with the relative-improvement column filled in.
pub fn report(rows: &[ResultRow]) -> Result<(String, String)> {
    let rows = with_relative_improvement(rows)?;
    let mut md = String::from("| mode | K | freeze | SpecAug F | SpecAug T | dev | test | rel. impr. % |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let dash = |s: String| if s.is_empty() { "-".to_string() } else { s };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.mode.as_str(),
            dash(r.k.map(|k| k.to_string()).unwrap_or_default()),
            dash(r.freeze.map(|f| if f { "frozen" } else { "updated" }.to_string()).unwrap_or_default()),
            dash(r.specaug.map(|x| x.0.to_string()).unwrap_or_default()),
            dash(r.specaug.map(|x| x.1.to_string()).unwrap_or_default()),
            if r.error.is_some() { "failed".into() } else { dash(cell(r.dev_wer)) },
            if r.error.is_some() { "failed".into() } else { dash(cell(r.test_wer)) },
            dash(r.rel_improvement.map(|v| format!("{v:+.1}")).unwrap_or_default()),
        );
    }
    Ok((md, results_csv(&rows)))
}

/// Trains the source model if needed, then every reference row and grid cell
/// from identical seeds and data. A failing cell is recorded and the run goes on.
pub fn ablate(cfg: &AblationConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut source = cfg.source.clone();
    source.output_dir = out.join("source");
    let source_ckpt = final_checkpoint_path(&source.output_dir);
    if !source_ckpt.exists() {
        run_train(&source, false)?;
    }
    let t = &cfg.target;
    let dev = t.data.dev.as_ref().map(|d| d.load()).transpose()?;
    let test = t.data.test.as_ref().map(|d| d.load()).transpose()?;

    let mut cells = Vec::new();
    if cfg.grid.baseline {
        cells.push(ResultRow::new(Mode::Baseline));
    }
    if cfg.grid.vanilla {
        cells.push(ResultRow::new(Mode::Vanilla));
    }
    if cfg.grid.direct {
        cells.push(ResultRow::new(Mode::Direct));
    }
    for &freeze in &cfg.grid.freeze {
        for sa in &cfg.grid.specaug {
            for &k in &cfg.grid.ks {
                let mut r = ResultRow::new(Mode::Tap);
                r.k = Some(k);
                r.freeze = Some(freeze);
                r.specaug = sa.0;
                cells.push(r);
            }
        }
    }

    let template = t.transfer.clone().unwrap_or_default();
    let mut rows = Vec::with_capacity(cells.len());
    let mut errors = String::new();
    for mut row in cells {
        let mut c = t.clone();
        c.mode = row.mode;
        c.output_dir = out.join("cells").join(row.name());
        c.source_checkpoint = Some(source_ckpt.clone());
        if row.mode == Mode::Tap {
            c.transfer = Some(TransferConfig {
                tap_layer_k: row.k.expect("tap cell"),
                freeze_prefix: row.freeze.expect("tap cell"),
                embed_specaug: row.specaug.map(|(f, t)| SpecAugPolicy::new(f, t)),
                ..template.clone()
            });
        }
        let outcome = (|| -> Result<(Option<f64>, Option<f64>)> {
            let summary = run_train(&c, false)?;
            let eval = |utts: &Option<Vec<_>>, name: &str| -> Result<Option<f64>> {
                utts.as_ref()
                    .map(|u| {
                        run_evaluate(
                            &summary.final_checkpoint,
                            u,
                            &c.frontend,
                            &c.decode,
                            c.unit,
                            Some(&c.output_dir.join(name)),
                        )
                        .map(|r| r.wer)
                    })
                    .transpose()
            };
            Ok((eval(&dev, "dev")?, eval(&test, "test")?))
        })();
        match outcome {
            Ok((d, te)) => {
                row.dev_wer = d;
                row.test_wer = te;
            }
            Err(e) => {
                let _ = writeln!(errors, "{}: {e}", row.name());
                eprintln!("cell {} failed: {e}", row.name());
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
        fs::write(out.join("results.csv"), results_csv(&rows))?;
    }
    if !errors.is_empty() {
        fs::write(out.join("errors.log"), &errors)?;
    }
    let rows = match with_relative_improvement(&rows) {
        Ok(r) => r,
        Err(_) => rows,
    };
    fs::write(out.join("results.csv"), results_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: Mode, test: f64) -> ResultRow {
        ResultRow {
            test_wer: Some(test),
            ..ResultRow::new(mode)
        }
    }

    #[test]
    fn relative_improvement_arithmetic() {
        assert!((relative_improvement(10.0, 7.0).unwrap() - 30.0).abs() < 1e-12);
        assert_eq!(relative_improvement(10.0, 10.0).unwrap(), 0.0);
        assert!(relative_improvement(0.0, 1.0).is_err());
    }

    #[test]
    fn report_requires_baseline() {
        assert!(report(&[row(Mode::Vanilla, 5.0)]).is_err());
        let (md, csv) = report(&[row(Mode::Baseline, 10.0), row(Mode::Vanilla, 7.0)]).unwrap();
        assert!(csv.contains("vanilla,,,,,,7.00,30.00"), "{csv}");
        assert!(md.contains("+30.0"));
    }

    #[test]
    fn csv_roundtrip_with_failures() {
        let mut tap = row(Mode::Tap, 4.0);
        tap.k = Some(6);
        tap.freeze = Some(true);
        tap.specaug = Some((20, 10));
        let mut failed = ResultRow::new(Mode::Tap);
        failed.k = Some(2);
        failed.freeze = Some(false);
        failed.error = Some("boom".into());
        let rows = with_relative_improvement(&[row(Mode::Baseline, 8.0), tap, failed]).unwrap();
        let csv = results_csv(&rows);
        assert!(csv.contains("tap,2,false,,,failed,failed,"), "{csv}");
        let back = parse_results_csv(&csv, Path::new("r.csv")).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].specaug, Some((20, 10)));
        assert_eq!(back[1].rel_improvement, Some(50.0));
        assert!(back[2].error.is_some());
    }

    #[test]
    fn mask_widths_parse() {
        let g: AblationGrid = serde_yaml::from_str("specaug: [none, 20x10, 20x20]").unwrap();
        assert_eq!(g.specaug[1], MaskWidths(Some((20, 10))));
        assert_eq!(g.specaug[0].policy(), None);
        assert!(serde_yaml::from_str::<AblationGrid>("specaug: [20]").is_err());
    }
}
