//! Result tables, SVG figures, and the trend-check JSON, built from the
//! artifacts of a completed run.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::Placement;
use crate::error::{Error, Result};
use crate::model::GrammarModule;

use super::plot::{bar_chart, heatmap, line_chart};
use super::{variant_name, PplSummary, RunPaths, PLACEMENTS, PPL_MODELS, TEXTS, VARIANTS};

pub const REPORT_FILES: [&str; 9] = [
    "fig_ppl.csv",
    "fig_ppl.svg",
    "fig_probe.csv",
    "fig_probe.svg",
    "fig_tda_h0.csv",
    "fig_tda_h0.svg",
    "fig_tda_h1.csv",
    "fig_tda_h1.svg",
    "trends.json",
];

fn require(stage: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingStageOutput { stage: stage.to_string(), path: path.to_path_buf() })
    }
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

/// Per-layer means parsed back from a probe summary CSV.
fn read_probe_summary(stage: &str, path: &Path) -> Result<Vec<(f64, f64)>> {
    require(stage, path)?;
    let rows = read_csv_rows(path)?;
    if rows.is_empty() {
        return Err(Error::MissingStageOutput {
            stage: stage.to_string(),
            path: path.to_path_buf(),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.len() != 3 {
            return Err(Error::Format {
                what: "probe summary",
                path: path.to_path_buf(),
                reason: format!("expected 3 columns, found {}", row.len()),
            });
        }
        let bad = |e: std::num::ParseFloatError| Error::Format {
            what: "probe summary",
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        out.push((row[1].parse().map_err(bad)?, row[2].parse().map_err(bad)?));
    }
    Ok(out)
}

/// Labeled square matrix parsed back from a distance CSV.
fn read_distance_matrix(stage: &str, path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    require(stage, path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::MissingStageOutput {
        stage: stage.to_string(),
        path: path.to_path_buf(),
    })?;
    let labels: Vec<String> = head.split(',').skip(1).map(str::to_string).collect();
    let mut matrix = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        let row: std::result::Result<Vec<f64>, _> =
            cells[1..].iter().map(|c| c.parse::<f64>()).collect();
        matrix.push(row.map_err(|e| Error::Format {
            what: "distance matrix",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?);
    }
    if matrix.len() != labels.len() {
        return Err(Error::Format {
            what: "distance matrix",
            path: path.to_path_buf(),
            reason: format!("{} labels but {} rows", labels.len(), matrix.len()),
        });
    }
    Ok((labels, matrix))
}

fn entry(
    labels: &[String],
    matrix: &[Vec<f64>],
    row: &str,
    col: &str,
    path: &Path,
) -> Result<f64> {
    let find = |l: &str| {
        labels.iter().position(|x| x == l).ok_or_else(|| Error::Format {
            what: "distance matrix",
            path: path.to_path_buf(),
            reason: format!("label {l} missing"),
        })
    };
    Ok(matrix[find(row)?][find(col)?])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplSide {
    pub base_mean: f64,
    pub poly_mean: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendA {
    pub pass: bool,
    pub per_placement: BTreeMap<String, PplSide>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapShrink {
    pub pretrained_gap: f64,
    pub finetuned_gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendB {
    pub pass: bool,
    pub per_variant: BTreeMap<String, GapShrink>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRise {
    pub layer0_probability: f64,
    pub last_layer_probability: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendC {
    pub pass: bool,
    pub per_variant: BTreeMap<String, ProbeRise>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TdaShift {
    pub poly_distance: f64,
    pub base_distance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendD {
    pub pass: bool,
    /// The gating comparison: suffix placement, MLP grammar tap against
    /// the frozen backbone tap, H0.
    pub primary: TdaShift,
    /// Same comparison for the other placement/variant combinations,
    /// recorded for inspection without gating the check.
    pub informational: BTreeMap<String, TdaShift>,
}

/// One run's trend checks; the acceptance suite majority-votes these
/// across master seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trends {
    pub a_pretrained_poly_ppl_higher: TrendA,
    pub b_finetune_shrinks_gap: TrendB,
    pub c_probe_rises_over_layers: TrendC,
    pub d_tda_poly_shift_exceeds_base: TrendD,
    pub all_pass: bool,
}

impl Trends {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "trends",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

struct LoadedRun {
    ppl: BTreeMap<(Placement, &'static str, &'static str), PplSummary>,
    probe: BTreeMap<(Placement, GrammarModule), Vec<(f64, f64)>>,
    tda: BTreeMap<(Placement, usize), (Vec<String>, Vec<Vec<f64>>)>,
    tda_paths: BTreeMap<(Placement, usize), PathBuf>,
}

fn load_run(paths: &RunPaths) -> Result<LoadedRun> {
    let mut ppl = BTreeMap::new();
    for placement in PLACEMENTS {
        for model in PPL_MODELS {
            for text in TEXTS {
                let path = paths.ppl_json(placement, model, text);
                require(&format!("ppl-{placement}-{model}-{text}"), &path)?;
                ppl.insert((placement, model, text), PplSummary::load(&path)?);
            }
        }
    }
    let mut probe = BTreeMap::new();
    for placement in PLACEMENTS {
        for variant in VARIANTS {
            let stage = format!("probe-{placement}-{}", variant_name(variant));
            let summary = read_probe_summary(&stage, &paths.probe_summary(placement, variant))?;
            probe.insert((placement, variant), summary);
        }
    }
    let mut tda = BTreeMap::new();
    let mut tda_paths = BTreeMap::new();
    for placement in PLACEMENTS {
        for dim in [0usize, 1] {
            let path = paths.tda_matrix(placement, dim);
            let parsed = read_distance_matrix(&format!("tda-{placement}"), &path)?;
            tda.insert((placement, dim), parsed);
            tda_paths.insert((placement, dim), path);
        }
    }
    Ok(LoadedRun { ppl, probe, tda, tda_paths })
}

fn evaluate_trends(run: &LoadedRun) -> Result<Trends> {
    let mut per_placement = BTreeMap::new();
    for placement in PLACEMENTS {
        let base = run.ppl[&(placement, "pre", "base")].mean;
        let poly = run.ppl[&(placement, "pre", "poly")].mean;
        per_placement.insert(
            placement.to_string(),
            PplSide { base_mean: base, poly_mean: poly, pass: poly > base },
        );
    }
    let a = TrendA { pass: per_placement.values().all(|s| s.pass), per_placement };

    let mut gaps = BTreeMap::new();
    for placement in PLACEMENTS {
        let pre_gap = run.ppl[&(placement, "pre", "poly")].mean
            - run.ppl[&(placement, "pre", "base")].mean;
        for variant in ["mlp", "lstm"] {
            let ft_gap = run.ppl[&(placement, variant, "poly")].mean
                - run.ppl[&(placement, variant, "base")].mean;
            gaps.insert(
                format!("{placement}/{variant}"),
                GapShrink {
                    pretrained_gap: pre_gap,
                    finetuned_gap: ft_gap,
                    // "Shrinks" compares sizes, so a gap that flips sign
                    // and widens does not count.
                    pass: ft_gap.abs() < pre_gap.abs(),
                },
            );
        }
    }
    let b = TrendB { pass: gaps.values().all(|g| g.pass), per_variant: gaps };

    let mut rises = BTreeMap::new();
    for placement in PLACEMENTS {
        for variant in VARIANTS {
            let layers = &run.probe[&(placement, variant)];
            let first = layers.first().expect("summary nonempty").0;
            let last = layers.last().expect("summary nonempty").0;
            rises.insert(
                format!("{placement}/{}", variant_name(variant)),
                ProbeRise {
                    layer0_probability: first,
                    last_layer_probability: last,
                    pass: last > first,
                },
            );
        }
    }
    let c = TrendC { pass: rises.values().all(|r| r.pass), per_variant: rises };

    let shift = |placement: Placement, variant: &str| -> Result<TdaShift> {
        let (labels, matrix) = &run.tda[&(placement, 0)];
        let path = &run.tda_paths[&(placement, 0)];
        let poly = entry(labels, matrix, "pre/poly/backbone", &format!("{variant}/poly/grammar"), path)?;
        let base = entry(labels, matrix, "pre/base/backbone", &format!("{variant}/base/grammar"), path)?;
        Ok(TdaShift { poly_distance: poly, base_distance: base, pass: poly > 0.0 && poly > base })
    };
    let primary = shift(Placement::Suffix, "mlp")?;
    let mut informational = BTreeMap::new();
    for (placement, variant) in [
        (Placement::Suffix, "lstm"),
        (Placement::Prefix, "mlp"),
        (Placement::Prefix, "lstm"),
    ] {
        informational.insert(format!("{placement}/{variant}"), shift(placement, variant)?);
    }
    let d = TrendD { pass: primary.pass, primary, informational };

    let all_pass = a.pass && b.pass && c.pass && d.pass;
    Ok(Trends {
        a_pretrained_poly_ppl_higher: a,
        b_finetune_shrinks_gap: b,
        c_probe_rises_over_layers: c,
        d_tda_poly_shift_exceeds_base: d,
        all_pass,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the figure CSV/SVG pairs and trends.json from the run's stage
/// outputs. Pure function of those artifacts: regenerating yields
/// byte-identical files.
pub fn emit_report(paths: &RunPaths) -> Result<()> {
    let run = load_run(paths)?;

    let mut ppl_csv = String::from("placement,model,text,mean,std,token_weighted_ppl,sample_size,skipped\n");
    let mut ppl_bars = Vec::new();
    for placement in PLACEMENTS {
        for model in PPL_MODELS {
            for text in TEXTS {
                let s = &run.ppl[&(placement, model, text)];
                ppl_csv.push_str(&format!(
                    "{placement},{model},{text},{},{},{},{},{}\n",
                    s.mean, s.std, s.token_weighted_ppl, s.sample_size, s.skipped
                ));
                ppl_bars.push((format!("{placement}/{model}/{text}"), s.mean));
            }
        }
    }
    write_text(&paths.report_file("fig_ppl.csv"), &ppl_csv)?;
    write_text(
        &paths.report_file("fig_ppl.svg"),
        &bar_chart("Mean pseudo-perplexity by setting", &ppl_bars),
    )?;

    let mut probe_csv = String::from("placement,variant,layer,mean_probability,mean_rank\n");
    let mut probe_series = Vec::new();
    let mut depth = 0usize;
    for placement in PLACEMENTS {
        for variant in VARIANTS {
            let layers = &run.probe[&(placement, variant)];
            depth = depth.max(layers.len());
            for (layer, (p, r)) in layers.iter().enumerate() {
                probe_csv.push_str(&format!(
                    "{placement},{},{layer},{p},{r}\n",
                    variant_name(variant)
                ));
            }
            probe_series.push((
                format!("{placement}/{}", variant_name(variant)),
                layers.iter().map(|(p, _)| *p).collect::<Vec<f64>>(),
            ));
        }
    }
    let layer_labels: Vec<String> = (0..depth).map(|l| l.to_string()).collect();
    write_text(&paths.report_file("fig_probe.csv"), &probe_csv)?;
    write_text(
        &paths.report_file("fig_probe.svg"),
        &line_chart("Gold-token probability by layer", &layer_labels, &probe_series),
    )?;

    for dim in [0usize, 1] {
        let mut csv = String::from("placement,row,column,distance\n");
        let mut svg = String::new();
        for placement in PLACEMENTS {
            let (labels, matrix) = &run.tda[&(placement, dim)];
            for (i, row) in matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    csv.push_str(&format!("{placement},{},{},{v}\n", labels[i], labels[j]));
                }
            }
            svg.push_str(&heatmap(
                &format!("Mean H{dim} bottleneck distance, {placement} placement"),
                labels,
                matrix,
            ));
        }
        write_text(&paths.report_file(&format!("fig_tda_h{dim}.csv")), &csv)?;
        write_text(&paths.report_file(&format!("fig_tda_h{dim}.svg")), &svg)?;
    }

    let trends = evaluate_trends(&run)?;
    let trends_path = paths.report_file("trends.json");
    let mut file = std::fs::File::create(&trends_path).map_err(|e| Error::io(&trends_path, e))?;
    let text = serde_json::to_string_pretty(&trends).expect("trends serialize");
    writeln!(file, "{text}").map_err(|e| Error::io(&trends_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn ppl_fixture(paths: &RunPaths, means: &dyn Fn(Placement, &str, &str) -> f64) {
        for placement in PLACEMENTS {
            for model in PPL_MODELS {
                for text in TEXTS {
                    let mean = means(placement, model, text);
                    let summary = PplSummary {
                        setting: format!("{placement}/{model}/{text}"),
                        mean,
                        std: 0.5,
                        sample_size: 10,
                        skipped: 0,
                        token_weighted_ppl: mean * 0.9,
                    };
                    let path = paths.ppl_json(placement, model, text);
                    std::fs::write(&path, serde_json::to_string(&summary).unwrap()).unwrap();
                }
            }
        }
    }

    fn probe_fixture(paths: &RunPaths, rising: bool) {
        for placement in PLACEMENTS {
            for variant in VARIANTS {
                let (first, last) = if rising { (0.1, 0.6) } else { (0.6, 0.1) };
                let csv = format!(
                    "layer,mean_probability,mean_rank\n0,{first},20\n1,0.3,10\n2,{last},3\n"
                );
                std::fs::write(paths.probe_summary(placement, variant), csv).unwrap();
            }
        }
    }

    fn tda_fixture(paths: &RunPaths, poly_shift: f64, base_shift: f64) {
        let labels = super::super::tda_labels();
        for placement in PLACEMENTS {
            for dim in [0usize, 1] {
                let mut matrix = vec![vec![0.05; labels.len()]; labels.len()];
                for (i, _) in labels.iter().enumerate() {
                    matrix[i][i] = 0.0;
                }
                let at = |l: &str| labels.iter().position(|x| x == l).unwrap();
                let set = |m: &mut Vec<Vec<f64>>, a: usize, b: usize, v: f64| {
                    m[a][b] = v;
                    m[b][a] = v;
                };
                set(&mut matrix, at("pre/poly/backbone"), at("mlp/poly/grammar"), poly_shift);
                set(&mut matrix, at("pre/base/backbone"), at("mlp/base/grammar"), base_shift);
                crate::tda::write_distance_csv(&labels, &matrix, &paths.tda_matrix(placement, dim))
                    .unwrap();
            }
        }
    }

    fn passing_run(dir: &Path) -> RunPaths {
        let paths = RunPaths::new(dir);
        std::fs::create_dir_all(dir.join("scores")).unwrap();
        std::fs::create_dir_all(dir.join("probe")).unwrap();
        std::fs::create_dir_all(dir.join("tda")).unwrap();
        std::fs::create_dir_all(dir.join("report")).unwrap();
        // Pretrained gap poly-base = 2.0; fine-tuned gap = 0.5.
        ppl_fixture(&paths, &|_, model, text| match (model, text) {
            ("pre", "base") => 4.0,
            ("pre", "poly") => 6.0,
            (_, "base") => 3.0,
            (_, "poly") => 3.5,
            _ => unreachable!(),
        });
        probe_fixture(&paths, true);
        tda_fixture(&paths, 0.4, 0.1);
        paths
    }

    #[test]
    fn trends_pass_on_constructed_run() {
        let dir = TempDir::new().unwrap();
        let paths = passing_run(dir.path());
        emit_report(&paths).unwrap();
        for name in REPORT_FILES {
            assert!(paths.report_file(name).is_file(), "{name} missing");
        }
        let trends = Trends::load(&paths.report_file("trends.json")).unwrap();
        assert!(trends.all_pass);
        assert!(trends.a_pretrained_poly_ppl_higher.pass);
        let suffix = &trends.a_pretrained_poly_ppl_higher.per_placement["suffix"];
        assert_eq!(suffix.base_mean, 4.0);
        assert_eq!(suffix.poly_mean, 6.0);
        let gap = &trends.b_finetune_shrinks_gap.per_variant["prefix/lstm"];
        assert_eq!(gap.pretrained_gap, 2.0);
        assert_eq!(gap.finetuned_gap, 0.5);
        assert_eq!(trends.d_tda_poly_shift_exceeds_base.primary.poly_distance, 0.4);
        assert_eq!(trends.d_tda_poly_shift_exceeds_base.informational.len(), 3);
    }

    #[test]
    fn each_trend_fails_when_its_inputs_invert() {
        let dir = TempDir::new().unwrap();
        let paths = passing_run(dir.path());

        // Poly text scores lower than base on the pretrained model.
        ppl_fixture(&paths, &|_, model, text| match (model, text) {
            ("pre", "base") => 6.0,
            ("pre", "poly") => 4.0,
            (_, "base") => 3.0,
            (_, "poly") => 3.5,
            _ => unreachable!(),
        });
        emit_report(&paths).unwrap();
        let trends = Trends::load(&paths.report_file("trends.json")).unwrap();
        assert!(!trends.a_pretrained_poly_ppl_higher.pass);
        // The gap size still drops (2.0 to 0.5), so b survives the sign
        // flip alone.
        assert!(trends.b_finetune_shrinks_gap.pass);
        assert!(!trends.all_pass);

        // Fine-tuning overshoots: the gap flips sign and grows.
        let paths = passing_run(dir.path());
        ppl_fixture(&paths, &|_, model, text| match (model, text) {
            ("pre", "base") => 4.0,
            ("pre", "poly") => 6.0,
            (_, "base") => 6.0,
            (_, "poly") => 3.5,
            _ => unreachable!(),
        });
        emit_report(&paths).unwrap();
        let trends = Trends::load(&paths.report_file("trends.json")).unwrap();
        assert!(trends.a_pretrained_poly_ppl_higher.pass);
        assert!(!trends.b_finetune_shrinks_gap.pass);
        assert!(!trends.all_pass);

        let paths = passing_run(dir.path());
        probe_fixture(&paths, false);
        emit_report(&paths).unwrap();
        let trends = Trends::load(&paths.report_file("trends.json")).unwrap();
        assert!(!trends.c_probe_rises_over_layers.pass);
        assert!(trends.a_pretrained_poly_ppl_higher.pass);

        let paths = passing_run(dir.path());
        tda_fixture(&paths, 0.1, 0.4);
        emit_report(&paths).unwrap();
        let trends = Trends::load(&paths.report_file("trends.json")).unwrap();
        assert!(!trends.d_tda_poly_shift_exceeds_base.pass);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = TempDir::new().unwrap();
        let paths = passing_run(dir.path());
        emit_report(&paths).unwrap();
        let before: Vec<Vec<u8>> = REPORT_FILES
            .iter()
            .map(|n| std::fs::read(paths.report_file(n)).unwrap())
            .collect();
        emit_report(&paths).unwrap();
        for (name, old) in REPORT_FILES.iter().zip(&before) {
            let new = std::fs::read(paths.report_file(name)).unwrap();
            assert_eq!(&new, old, "{name} changed across regeneration");
        }
    }

    #[test]
    fn missing_inputs_name_the_stage() {
        let dir = TempDir::new().unwrap();
        let paths = passing_run(dir.path());
        std::fs::remove_file(paths.ppl_json(Placement::Prefix, "lstm", "poly")).unwrap();
        match emit_report(&paths) {
            Err(Error::MissingStageOutput { stage, .. }) => {
                assert_eq!(stage, "ppl-prefix-lstm-poly")
            }
            other => panic!("expected MissingStageOutput, got {other:?}"),
        }

        let paths = passing_run(dir.path());
        std::fs::write(
            paths.probe_summary(Placement::Suffix, GrammarModule::MlpHead),
            "layer,mean_probability,mean_rank\n",
        )
        .unwrap();
        match emit_report(&paths) {
            Err(Error::MissingStageOutput { stage, .. }) => assert_eq!(stage, "probe-suffix-mlp"),
            other => panic!("expected MissingStageOutput, got {other:?}"),
        }
    }

    #[test]
    fn figure_csvs_tabulate_every_setting() {
        let dir = TempDir::new().unwrap();
        let paths = passing_run(dir.path());
        emit_report(&paths).unwrap();

        let ppl = std::fs::read_to_string(paths.report_file("fig_ppl.csv")).unwrap();
        assert_eq!(ppl.lines().count(), 1 + 12);
        assert!(ppl.lines().any(|l| l.starts_with("suffix,pre,poly,6,")));

        let probe = std::fs::read_to_string(paths.report_file("fig_probe.csv")).unwrap();
        assert_eq!(probe.lines().count(), 1 + 4 * 3);

        let tda = std::fs::read_to_string(paths.report_file("fig_tda_h0.csv")).unwrap();
        assert_eq!(tda.lines().count(), 1 + 2 * 8 * 8);
        assert!(tda
            .lines()
            .any(|l| l == "suffix,pre/poly/backbone,mlp/poly/grammar,0.4"));
    }
}
