use std::path::{Path, PathBuf};

use cpcr::checkpoint::Checkpoint;
use cpcr::data::{
    generate_synthetic_dataset, load_volume_dataset, make_ssl_split, patient_ids,
    write_synthetic_archive, DatasetLayout, SplitTag, VolumeSample,
};
use cpcr::dbpnet::Branch;
use cpcr::losses::{kl_soft, ramp_up_weight, t_softmax, uncertainty_min_loss, LossWeights};
use cpcr::metrics::{
    asd, asd_brute_force, evaluate_volumes, hd95, hd95_and_asd, hd95_brute_force, BinaryMask3D,
    MetricsReport,
};
use cpcr::trainer::{
    class_names, predict_volume, RunOptions, TrainMeta, Trainer, TrainingArtifacts,
};
use cpcr::{Error, Result, Tensor4};

use crate::config::RunConfig;

/// Volumes named by the config: the on-disk dataset, or the synthetic spec
/// generated in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<VolumeSample>> {
    match (&cfg.dataset, &cfg.synthetic) {
        (Some(d), _) => load_volume_dataset(&d.path, d.layout),
        (None, Some(spec)) => generate_synthetic_dataset(spec),
        (None, None) => Err(Error::Data("no dataset configured".into())),
    }
}

fn count(volumes: &[VolumeSample], tag: SplitTag) -> usize {
    volumes.iter().filter(|v| v.split_tag == tag).count()
}

pub fn cmd_generate(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let spec = cfg.synthetic.as_ref().ok_or_else(|| Error::Config {
        field: "synthetic".into(),
        reason: "generate needs a [synthetic] section".into(),
    })?;
    spec.validate()?;
    let dir = match (out, &cfg.dataset) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) if d.layout == DatasetLayout::SyntheticArchive => d.path.clone(),
        _ => {
            return Err(Error::Argument(
                "no output directory: pass --out or a synthetic_archive [dataset]".into(),
            ))
        }
    };
    let volumes = generate_synthetic_dataset(spec)?;
    write_synthetic_archive(&dir, &volumes)?;
    let (d, h, w) = volumes[0].image.dim();
    println!(
        "wrote {} volumes of {d}x{h}x{w} to {}",
        volumes.len(),
        dir.display()
    );
    println!(
        "split: {} train / {} val / {} test",
        count(&volumes, SplitTag::Train),
        count(&volumes, SplitTag::Val),
        count(&volumes, SplitTag::Test)
    );
    let slices: usize = volumes.iter().map(|v| v.num_slices()).sum();
    let full = volumes
        .iter()
        .flat_map(|v| v.label.outer_iter())
        .filter(|s| (0..4u8).all(|c| s.iter().any(|&l| l == c)))
        .count();
    println!("slices with all four classes: {full}/{slices}");
    Ok(dir)
}

pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    workers: usize,
) -> Result<TrainingArtifacts> {
    let volumes = load_dataset(cfg)?;
    let train_ids = patient_ids(&volumes, SplitTag::Train);
    let split = make_ssl_split(&train_ids, cfg.labeled_ratio, cfg.train.seed)?;
    println!(
        "{} volumes; {} labeled / {} unlabeled training patients",
        volumes.len(),
        split.labeled_ids.len(),
        split.unlabeled_ids.len()
    );
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let resolved = cfg.out_dir.join("config.json");
    std::fs::write(&resolved, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| {
        Error::Io {
            path: resolved,
            source: e,
        }
    })?;
    let options = RunOptions {
        out_dir: Some(cfg.out_dir.clone()),
        workers,
        progress_every: Some(50),
    };
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg.train.clone(), &volumes, split, ck, options)?,
        None => Trainer::new(
            cfg.train.clone(),
            cfg.network.clone(),
            &volumes,
            split,
            options,
        )?,
    };
    trainer.run()?;
    let artifacts = trainer.into_artifacts();
    for v in &artifacts.validations {
        println!(
            "val @{:>6}: mean DSC {:.4}{}",
            v.iteration,
            v.mean_dsc,
            if v.improved { " *" } else { "" }
        );
    }
    let test: Vec<VolumeSample> = volumes
        .into_iter()
        .filter(|v| v.split_tag == SplitTag::Test)
        .collect();
    let chosen = artifacts
        .best_checkpoint
        .clone()
        .or_else(|| artifacts.last_checkpoint.clone());
    if let (false, Some(ck)) = (test.is_empty(), chosen) {
        let report = evaluate_checkpoint(&ck, &test, None, false)?;
        report.write(&cfg.out_dir, "test_report")?;
        println!("test set ({}):\n{}", ck.display(), report.summary());
    }
    Ok(artifacts)
}

/// Segments `volumes` with the network stored in `checkpoint`. With
/// `oracle`, every distance metric is recomputed by exhaustive search and
/// must agree within 1e-6.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    volumes: &[VolumeSample],
    expected: Option<&cpcr::dbpnet::NetworkConfig>,
    oracle: bool,
) -> Result<MetricsReport> {
    if volumes.is_empty() {
        return Err(Error::Data("no volumes in the requested split".into()));
    }
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let net = ck.to_network(expected)?;
    let branch = serde_json::from_value::<TrainMeta>(ck.metadata.clone())
        .map(|m| m.train_config.inference_branch)
        .unwrap_or(Branch::Up);
    let preds = volumes
        .iter()
        .map(|v| predict_volume(&net, &v.image, branch))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = volumes.iter().map(|v| v.label.clone()).collect();
    let ids: Vec<String> = volumes.iter().map(|v| v.volume_id.clone()).collect();
    let names = class_names(net.config().num_classes);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    if oracle {
        check_oracle(&preds, &gts, &ids, refs.len())?;
    }
    evaluate_volumes(&preds, &gts, &ids, &refs, [1.0; 3])
}

fn check_oracle(
    preds: &[ndarray::Array3<u8>],
    gts: &[ndarray::Array3<u8>],
    ids: &[String],
    num_classes: usize,
) -> Result<()> {
    let mut checked = 0;
    for ((p, g), id) in preds.iter().zip(gts).zip(ids) {
        for c in 1..num_classes as u8 {
            let pm = BinaryMask3D::from_labels(p, c, [1.0; 3])?;
            let gm = BinaryMask3D::from_labels(g, c, [1.0; 3])?;
            if pm.count() == 0 || gm.count() == 0 {
                continue;
            }
            let (h, a) = hd95_and_asd(&pm, &gm)?;
            let (hb, ab) = (hd95_brute_force(&pm, &gm)?, asd_brute_force(&pm, &gm)?);
            if (h - hb).abs() > 1e-6 || (a - ab).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "oracle disagreement on {id} class {c}: hd95 {h} vs {hb}, asd {a} vs {ab}"
                )));
            }
            checked += 1;
        }
    }
    println!("oracle: brute-force hd95/asd agree on {checked} (volume, class) pairs");
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: SplitTag,
    out: Option<&Path>,
    oracle: bool,
    check_config: bool,
) -> Result<MetricsReport> {
    let volumes: Vec<VolumeSample> = load_dataset(cfg)?
        .into_iter()
        .filter(|v| v.split_tag == split)
        .collect();
    let report = evaluate_checkpoint(
        checkpoint,
        &volumes,
        check_config.then_some(&cfg.network),
        oracle,
    )?;
    let dir = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    report.write(&dir, &format!("{split}_report"))?;
    println!(
        "{} volumes ({split}):\n{}",
        report.num_volumes,
        report.summary()
    );
    Ok(report)
}

/// Outcome of one self-test check.
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, got: f64, want: f64, tol: f64) -> Check {
    Check {
        name,
        passed: (got - want).abs() <= tol,
        detail: format!("got {got:.8}, want {want} ± {tol:e}"),
    }
}

fn column(v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec([1, v.len(), 1, 1], v.to_vec()).expect("column shape")
}

/// Closed-form loss values and metric oracle checks.
pub fn selftest_checks() -> Result<Vec<Check>> {
    let w = LossWeights::default();
    let p1 = t_softmax(&column(&[1.0, 0.0]), 1.0)?;
    let p10 = t_softmax(&column(&[1.0, 0.0]), 10.0)?;
    let same = column(&[0.2, 0.3, 0.5]);
    let mut checks = vec![
        check("t_softmax([1,0], T=1)[0]", p1.data()[0], 0.7311, 1e-4),
        check("t_softmax([1,0], T=10)[0]", p10.data()[0], 0.5250, 1e-4),
        check("kl_soft(p, p)", kl_soft(&same, &same)?, 0.0, 1e-7),
        check(
            "kl_soft([.5,.5] | [.75,.25])",
            kl_soft(&column(&[0.5, 0.5]), &column(&[0.75, 0.25]))?,
            0.13081,
            1e-4,
        ),
        check(
            "entropy of uniform-4",
            uncertainty_min_loss(&column(&[0.25; 4]), &column(&[0.25; 4]))?,
            4f64.ln(),
            1e-4,
        ),
        check("lambda(0)", ramp_up_weight(0, &w), 6.738e-4, 1e-6),
        check("lambda(100)", ramp_up_weight(100, &w), 0.028650, 1e-5),
        check("lambda(200)", ramp_up_weight(200, &w), 0.1, 0.0),
        check("lambda(300)", ramp_up_weight(300, &w), 0.1, 0.0),
    ];
    let mut a = ndarray::Array3::from_elem((2, 5, 6), false);
    let mut b = a.clone();
    a[[0, 0, 0]] = true;
    b[[0, 3, 4]] = true;
    let (a, b) = (BinaryMask3D::new(a)?, BinaryMask3D::new(b)?);
    checks.push(check("hd95 of offset (0,3,4)", hd95(&a, &b)?, 5.0, 1e-12));
    checks.push(check("asd of offset (0,3,4)", asd(&a, &b)?, 5.0, 1e-12));
    let blob =
        ndarray::Array3::from_shape_fn((6, 7, 8), |(z, y, x)| (z * 3 + y * 5 + x * 7) % 11 < 4);
    let ring = ndarray::Array3::from_shape_fn((6, 7, 8), |(z, y, x)| (z + 2 * y + x) % 5 == 0);
    let (p, g) = (BinaryMask3D::new(blob)?, BinaryMask3D::new(ring)?);
    checks.push(check(
        "hd95 fast vs brute force",
        hd95(&p, &g)?,
        hd95_brute_force(&p, &g)?,
        1e-6,
    ));
    checks.push(check(
        "asd fast vs brute force",
        asd(&p, &g)?,
        asd_brute_force(&p, &g)?,
        1e-6,
    ));
    Ok(checks)
}
