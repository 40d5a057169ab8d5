use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use covidscreen_core::data::{
    cxr_protocol_split, load_manifest_with, patients_per_split, stratified_split, validate_image, DatasetManifest,
    LabelMap, Modality, SplitRatios,
};
use serde::Serialize;

use crate::args::{DatasetArgs, ScanArgs, SplitArgs, ValidateArgs};
use crate::run_config::write_run_config;

pub fn label_map(args: &DatasetArgs) -> Result<LabelMap> {
    match &args.label_map {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading label map {}", p.display()))?;
            Ok(LabelMap::parse(&text)?)
        }
        None => Ok(LabelMap::canonical()),
    }
}

/// Manifest from `--manifest`, `<data>/manifest.csv`, or the class-directory layout.
pub fn load_dataset(args: &DatasetArgs) -> Result<DatasetManifest> {
    let labels = label_map(args)?;
    if let Some(m) = &args.manifest {
        if !m.is_file() {
            bail!("manifest not found: {}", m.display());
        }
        return Ok(load_manifest_with(m, &labels)?);
    }
    let Some(root) = &args.data else { bail!("one of --data or --manifest is required") };
    if !root.is_dir() {
        bail!("dataset directory not found: {}", root.display());
    }
    let file = root.join("manifest.csv");
    if file.is_file() {
        return Ok(load_manifest_with(&file, &labels)?);
    }
    let manifest = DatasetManifest::from_layout(root, args.modality.into(), &labels)?;
    if manifest.is_empty() {
        bail!("no images under {}", root.display());
    }
    Ok(manifest)
}

#[derive(Serialize)]
struct DataRun<'a> {
    seed: u64,
    modality: &'a str,
    source: String,
    label_map: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ratios: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_by_patient: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    strict: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra_test: Option<String>,
}

fn data_run(args: &DatasetArgs, seed: u64) -> DataRun<'static> {
    let source = args.manifest.as_ref().or(args.data.as_ref()).map(|p| p.display().to_string()).unwrap_or_default();
    DataRun {
        seed,
        modality: Modality::from(args.modality).as_str(),
        source,
        label_map: args.label_map.as_ref().map(|p| p.display().to_string()),
        ratios: None,
        group_by_patient: None,
        strict: None,
        extra_test: None,
    }
}

pub fn scan(args: &ScanArgs) -> Result<()> {
    let manifest = load_dataset(&args.dataset)?;
    save_relative(&manifest, &args.out)?;
    println!("{} records written to {}", manifest.len(), args.out.display());
    write_run_config(&args.out, "data scan", &data_run(&args.dataset, 0))?;
    Ok(())
}

/// Saves with record paths rewritten relative to the output file's directory.
fn save_relative(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(out_dir)?;
    let mut m = manifest.clone();
    let same_root = out_dir.canonicalize().ok() == manifest.root.canonicalize().ok();
    if !same_root {
        let root = manifest.root.canonicalize().unwrap_or_else(|_| manifest.root.clone());
        for r in &mut m.records {
            r.path = root.join(&r.path);
        }
    }
    m.save(out)?;
    Ok(())
}

pub fn validate(args: &ValidateArgs) -> Result<()> {
    let manifest = load_dataset(&args.dataset)?;
    let strict = args.strict || (!args.lenient && Modality::from(args.dataset.modality) == Modality::Ct);
    let mut failed = 0;
    let mut report = String::from("image_id,passed,width,height,bit_depth,reasons\n");
    for record in &manifest.records {
        let line = match validate_image(record, &manifest.root, strict) {
            Ok(v) => {
                if !v.passed {
                    failed += 1;
                    eprintln!("{}: {}", v.image_id, v.reasons.join("; "));
                }
                format!("{},{},{},{},{},{}", v.image_id, v.passed, v.width, v.height, v.bit_depth, v.reasons.join("; "))
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", record.image_id);
                format!("{},false,,,,{}", record.image_id, e.to_string().replace(',', ";"))
            }
        };
        let _ = writeln!(report, "{line}");
    }
    println!(
        "{} images checked ({} mode): {} passed, {} failed",
        manifest.len(),
        if strict { "strict" } else { "lenient" },
        manifest.len() - failed,
        failed
    );
    if let Some(path) = &args.report {
        std::fs::write(path, report).with_context(|| format!("writing {}", path.display()))?;
        write_run_config(path, "data validate", &DataRun { strict: Some(strict), ..data_run(&args.dataset, 0) })?;
    }
    if failed > 0 {
        bail!("{failed} image(s) failed validation");
    }
    Ok(())
}

fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("ratio {p:?} is not a number")))
        .collect::<Result<_>>()?;
    let [train, val, test] = parts[..] else { bail!("--ratios needs three comma-separated values, got {text:?}") };
    Ok(SplitRatios::new(train, val, test)?)
}

pub fn split(args: &SplitArgs) -> Result<()> {
    let mut manifest = load_dataset(&args.dataset)?;
    let ratios = parse_ratios(&args.ratios)?;
    let group = if args.group_by_patient {
        true
    } else if args.no_group_by_patient {
        false
    } else {
        Modality::from(args.dataset.modality) == Modality::Ct
    };
    let assignment = match &args.extra_test {
        Some(extra) => {
            let extra_manifest = load_manifest_with(extra, &label_map(&args.dataset)?)?;
            if args.ratios != "0.7,0.1,0.2" {
                tracing::warn!("--ratios is ignored with --extra-test; the protocol split is 70/30");
            }
            let a = cxr_protocol_split(&manifest.records, &extra_manifest.records, args.seed, group)?;
            let root = manifest.root.canonicalize().unwrap_or_else(|_| manifest.root.clone());
            let extra_root = extra_manifest.root.canonicalize().unwrap_or_else(|_| extra_manifest.root.clone());
            for r in &mut manifest.records {
                r.path = root.join(&r.path);
            }
            for mut r in extra_manifest.records {
                r.path = extra_root.join(&r.path);
                manifest.records.push(r);
            }
            a
        }
        None => stratified_split(&manifest.records, ratios, args.seed, group)?,
    };
    manifest.apply_split(&assignment);
    save_relative(&manifest, &args.out)?;
    print!("{}", manifest.split_counts().to_table());
    let patients: BTreeMap<_, _> = patients_per_split(&manifest).into_iter().map(|(s, p)| (s.as_str(), p.len())).collect();
    println!("patients per split: {patients:?} (grouped: {group})");
    let run = DataRun {
        ratios: Some(ratios.as_array()),
        group_by_patient: Some(group),
        extra_test: args.extra_test.as_ref().map(|p| p.display().to_string()),
        ..data_run(&args.dataset, args.seed)
    };
    write_run_config(&args.out, "data split", &run)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("0.7,0.1,0.2").unwrap().as_array(), [0.7, 0.1, 0.2]);
        assert!(parse_ratios("0.7,0.3").is_err());
        assert!(parse_ratios("a,b,c").is_err());
        assert!(parse_ratios("0.9,0.9,0.2").is_err());
    }
}
