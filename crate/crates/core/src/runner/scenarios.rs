//! The thirteen scenario pipelines.

use crate::data::{make_targeted, split_by_ratio, split_overlap, split_stages, DatasetSplit, QAPair};
use crate::error::{Error, Result};
use crate::eval::heldout_utility;
use crate::extrapolation::{direction_cosine, direction_delta, momentum_update, mox_extrapolate, task_vector_unlearn};
use crate::objectives::{ObjectiveSpec, Variant};
use crate::tensor::{distance, ParamStore};
use crate::trainer::TrainData;

use super::{Base, CosineEntry, CurvePoint, Prepared, Provenance, ReportRow, Run, Scenario, Trained};

pub(super) fn dispatch(run: &mut Run) -> Result<()> {
    for seed in run.cfg.seeds.clone() {
        let base = run.base(seed)?;
        match run.cfg.scenario {
            Scenario::Finetune => finetune(run, &base)?,
            Scenario::UnlearnBaselines => unlearn_baselines(run, &base)?,
            Scenario::MoxAlphaSweep => alpha_sweep(run, &base)?,
            Scenario::EtaSweep => eta_sweep(run, &base)?,
            Scenario::Ablation => ablation(run, &base)?,
            Scenario::StabilityWeightSweep => stability_weight_sweep(run, &base)?,
            Scenario::ForgetSizeSweep => forget_size_sweep(run, &base)?,
            Scenario::DirectionAnalysis => direction_analysis(run, &base)?,
            Scenario::Trajectory => trajectory(run, &base)?,
            Scenario::Continual => continual(run, &base)?,
            Scenario::Relearn => relearn(run, &base)?,
            Scenario::Overlap => overlap(run, &base)?,
            Scenario::MotivationFig1 => motivation(run, &base)?,
        }
    }
    Ok(())
}

fn default_split(run: &mut Run, base: &Base) -> Result<Prepared> {
    let split = split_by_ratio(&base.corpus, run.cfg.forget_ratio, base.seed)?;
    run.prepare(base, &format!("s{}", base.seed), split)
}

fn row(run: &Run, base: &Base, prep: &Prepared, method: &str) -> ReportRow {
    ReportRow::new(run.scenario(), base.seed, method, prep.split.forget_ratio)
}

fn targets(run: &Run, base: &Base, forget: &[QAPair]) -> Result<Vec<QAPair>> {
    make_targeted(forget, &run.cfg.target_text, &run.vocab, base.model.config().ctx_len)
}

/// Trains `spec` from `anchor` (which is also the reference model) and
/// returns the final parameters plus one snapshot per epoch.
#[allow(clippy::too_many_arguments)]
fn train_from(
    run: &mut Run,
    base: &Base,
    name: &str,
    anchor: &ParamStore,
    data: &TrainData,
    spec: ObjectiveSpec,
    epochs: usize,
    lr: Option<f64>,
) -> Result<Option<(ParamStore, Vec<ParamStore>)>> {
    let mut config = run.cfg.unlearn_config(spec, base.seed);
    config.epochs = epochs;
    if let Some(lr) = lr {
        config.lr_peak = lr;
    }
    let mut snaps = Vec::new();
    let reference = spec.needs_reference().then_some(anchor);
    let name = format!("{name}-s{}", base.seed);
    match run.train(&name, &base.model, anchor, reference, data, &config, |_, t| {
        snaps.push(t.clone());
        Ok(())
    })? {
        Trained::Done(theta) => Ok(Some((theta, snaps))),
        Trained::Diverged => Ok(None),
    }
}

fn ensemble(anchor: &ParamStore, snaps: &[ParamStore], alpha: f64, eta: f64) -> Result<ParamStore> {
    let mut ens: Option<ParamStore> = None;
    for s in snaps {
        let f = mox_extrapolate(anchor, s, alpha)?;
        ens = Some(momentum_update(&f, ens.as_ref(), eta)?);
    }
    ens.ok_or_else(|| Error::arg("momentum needs at least one epoch"))
}

fn forget_data<'a>(prep: &'a Prepared) -> TrainData<'a> {
    TrainData::new(&prep.split.retain, &prep.split.forget)
}

fn finetune(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let r = row(run, base, &prep, "REF");
    run.record(r, base, &prep, Some(&base.theta_ref), Some(Provenance::Ref))?;
    let r = row(run, base, &prep, "ORACLE");
    run.record(r, base, &prep, Some(&prep.oracle.clone()), Some(Provenance::Oracle))?;
    Ok(())
}

/// Records a baseline trained with `variant` on the default data layout.
fn baseline(run: &mut Run, base: &Base, prep: &Prepared, method: &str, variant: Variant) -> Result<Option<ParamStore>> {
    let spec = run.cfg.objective(variant);
    let out = train_from(run, base, method, &base.theta_ref, &forget_data(prep), spec, run.cfg.epochs, None)?;
    let theta = out.map(|(t, _)| t);
    let r = row(run, base, prep, method);
    run.record(r, base, prep, theta.as_ref(), Some(Provenance::Baseline))?;
    Ok(theta)
}

/// MOX with the CE memorization objective: records the single-shot forget
/// model at `alpha` and, when `eta` is given, the momentum ensemble.
fn mox_ce(run: &mut Run, base: &Base, prep: &Prepared, eta: Option<f64>) -> Result<Option<(ParamStore, ParamStore)>> {
    let spec = run.cfg.objective(Variant::MoxMemCe);
    let alpha = run.cfg.alpha;
    let Some((mem, snaps)) = train_from(run, base, "MOX_MEM", &base.theta_ref, &forget_data(prep), spec, run.cfg.epochs, None)? else {
        return Ok(None);
    };
    let theta_for = mox_extrapolate(&base.theta_ref, &mem, alpha)?;
    let mut r = row(run, base, prep, "MOX");
    r.alpha = Some(alpha);
    run.record(r, base, prep, Some(&theta_for), Some(Provenance::For))?;
    if let Some(eta) = eta {
        let ens = ensemble(&base.theta_ref, &snaps, alpha, eta)?;
        let mut r = row(run, base, prep, "MOX_MOMENTUM");
        r.alpha = Some(alpha);
        r.eta = Some(eta);
        run.record(r, base, prep, Some(&ens), Some(Provenance::For))?;
    }
    Ok(Some((mem, theta_for)))
}

fn unlearn_baselines(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let r = row(run, base, &prep, "REF");
    run.record_bundle(r, base, &prep, false)?;
    let r = row(run, base, &prep, "ORACLE");
    run.record_bundle(r, base, &prep, true)?;
    for (method, variant) in [("GA", Variant::Ga), ("GAD", Variant::Gad), ("KL", Variant::KlBaseline), ("NPO", Variant::Npo)] {
        baseline(run, base, &prep, method, variant)?;
    }
    let targeted = targets(run, base, &prep.split.forget)?;

    let spec = run.cfg.objective(Variant::WeightedGd).with_beta(1.0);
    let data = TrainData::new(&prep.split.retain, &targeted);
    let out = train_from(run, base, "PO_TARGETED", &base.theta_ref, &data, spec, run.cfg.epochs, None)?;
    let r = row(run, base, &prep, "PO_TARGETED");
    run.record(r, base, &prep, out.map(|(t, _)| t).as_ref(), Some(Provenance::Baseline))?;

    let alpha = run.cfg.alpha;
    let ce = run.cfg.objective(Variant::Ce);
    let data = TrainData::new(&prep.split.forget, &[]);
    let out = train_from(run, base, "TV_FT", &base.theta_ref, &data, ce, run.cfg.epochs, None)?;
    let tv = out.map(|(ft, _)| task_vector_unlearn(&base.theta_ref, &ft, alpha)).transpose()?;
    let mut r = row(run, base, &prep, "TV");
    r.alpha = Some(alpha);
    run.record(r, base, &prep, tv.as_ref().map(|t| &t.theta), Some(Provenance::Baseline))?;

    let mem = mox_ce(run, base, &prep, Some(run.cfg.eta))?.map(|(m, _)| m);
    let r = row(run, base, &prep, "MEM");
    run.record(r, base, &prep, mem.as_ref(), Some(Provenance::Mem))?;

    let po = run.cfg.objective(Variant::MoxMemPo);
    let out = train_from(run, base, "MOX_PO_MEM", &base.theta_ref, &forget_data(&prep), po, run.cfg.epochs, None)?;
    let theta = out.map(|(m, _)| mox_extrapolate(&base.theta_ref, &m, alpha)).transpose()?;
    let mut r = row(run, base, &prep, "MOX_PO");
    r.alpha = Some(alpha);
    run.record(r, base, &prep, theta.as_ref(), Some(Provenance::For))?;

    let tspec = run.cfg.objective(Variant::MoxTargetedCe);
    let data = forget_data(&prep).with_targets(&targeted);
    let out = train_from(run, base, "MOX_TARGETED_MEM", &base.theta_ref, &data, tspec, run.cfg.epochs, None)?;
    let theta = out.map(|(m, _)| mox_extrapolate(&base.theta_ref, &m, alpha)).transpose()?;
    let mut r = row(run, base, &prep, "MOX_TARGETED");
    r.alpha = Some(alpha);
    run.record(r, base, &prep, theta.as_ref(), Some(Provenance::For))?;
    Ok(())
}

fn memorize_default(run: &mut Run, base: &Base, prep: &Prepared) -> Result<Option<(ParamStore, Vec<ParamStore>)>> {
    let spec = run.cfg.objective(Variant::MoxMemCe);
    train_from(run, base, "MOX_MEM", &base.theta_ref, &forget_data(prep), spec, run.cfg.epochs, None)
}

fn alpha_rows(run: &mut Run, base: &Base, prep: &Prepared, mem: Option<&ParamStore>, method: &str) -> Result<()> {
    for alpha in run.cfg.alpha_grid.clone() {
        let theta = mem.map(|m| mox_extrapolate(&base.theta_ref, m, alpha)).transpose()?;
        let mut r = row(run, base, prep, method);
        r.alpha = Some(alpha);
        run.record(r, base, prep, theta.as_ref(), Some(Provenance::For))?;
    }
    Ok(())
}

fn alpha_sweep(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let mem = memorize_default(run, base, &prep)?.map(|(m, _)| m);
    alpha_rows(run, base, &prep, mem.as_ref(), "MOX")
}

fn eta_sweep(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let out = memorize_default(run, base, &prep)?;
    let alpha = run.cfg.alpha;
    for eta in run.cfg.eta_grid.clone() {
        let theta = out.as_ref().map(|(_, snaps)| ensemble(&base.theta_ref, snaps, alpha, eta)).transpose()?;
        let mut r = row(run, base, &prep, "MOX_MOMENTUM");
        r.alpha = Some(alpha);
        r.eta = Some(eta);
        run.record(r, base, &prep, theta.as_ref(), Some(Provenance::For))?;
    }
    Ok(())
}

fn ablation(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let targeted = targets(run, base, &prep.split.forget)?;
    let kl = run.cfg.kl_weight;
    let alpha = run.cfg.alpha;
    let table = [
        ("MOX(GD)", Variant::MoxMemCe, 0.0),
        ("MOX(GD+KL)", Variant::MoxMemCe, kl),
        ("MOX(GD+target)", Variant::MoxTargetedCe, 0.0),
        ("MOX(GD+KL+target)", Variant::MoxTargetedCe, kl),
        ("MOX(PO)", Variant::MoxMemPo, 0.0),
        ("MOX(PO+KL)", Variant::MoxMemPo, kl),
        ("MOX(PO+target)", Variant::MoxTargetedPo, 0.0),
        ("MOX(PO+KL+target)", Variant::MoxTargetedPo, kl),
    ];
    for (method, variant, w) in table {
        let spec = run.cfg.objective(variant).with_kl_weight(w);
        let data = if variant.is_targeted() { forget_data(&prep).with_targets(&targeted) } else { forget_data(&prep) };
        let name = method.replace(['(', ')'], "").replace('+', "_");
        let out = train_from(run, base, &name, &base.theta_ref, &data, spec, run.cfg.epochs, None)?;
        let theta = out.map(|(m, _)| mox_extrapolate(&base.theta_ref, &m, alpha)).transpose()?;
        let mut r = row(run, base, &prep, method);
        r.alpha = Some(alpha);
        run.record(r, base, &prep, theta.as_ref(), Some(Provenance::For))?;
    }
    Ok(())
}

fn stability_weight_sweep(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    for beta in run.cfg.stability_betas.clone() {
        for (method, spec) in [
            ("GA", run.cfg.objective(Variant::WeightedGa).with_beta(beta)),
            ("NPO", run.cfg.objective(Variant::Npo).with_beta(beta)),
        ] {
            let name = format!("{method}-b{beta}");
            let out = train_from(run, base, &name, &base.theta_ref, &forget_data(&prep), spec, run.cfg.epochs, None)?;
            let mut r = row(run, base, &prep, method);
            r.beta = Some(beta);
            run.record(r, base, &prep, out.map(|(t, _)| t).as_ref(), Some(Provenance::Baseline))?;
        }
    }
    let mem = memorize_default(run, base, &prep)?.map(|(m, _)| m);
    alpha_rows(run, base, &prep, mem.as_ref(), "MOX")
}

fn forget_size_sweep(run: &mut Run, base: &Base) -> Result<()> {
    for ratio in run.cfg.forget_ratios.clone() {
        let split = split_by_ratio(&base.corpus, ratio, base.seed)?;
        let prep = run.prepare(base, &format!("r{ratio}-s{}", base.seed), split)?;
        for (method, variant) in [("GA", Variant::Ga), ("NPO", Variant::Npo)] {
            let spec = run.cfg.objective(variant);
            let name = format!("{method}-r{ratio}");
            let out = train_from(run, base, &name, &base.theta_ref, &forget_data(&prep), spec, run.cfg.epochs, None)?;
            let r = row(run, base, &prep, method);
            run.record(r, base, &prep, out.map(|(t, _)| t).as_ref(), Some(Provenance::Baseline))?;
        }
        let spec = run.cfg.objective(Variant::MoxMemCe);
        let name = format!("MOX_MEM-r{ratio}");
        let out = train_from(run, base, &name, &base.theta_ref, &forget_data(&prep), spec, run.cfg.epochs, None)?;
        let (alpha, eta) = (run.cfg.alpha, run.cfg.eta);
        let single = out.as_ref().map(|(m, _)| mox_extrapolate(&base.theta_ref, m, alpha)).transpose()?;
        let mut r = row(run, base, &prep, "MOX");
        r.alpha = Some(alpha);
        run.record(r, base, &prep, single.as_ref(), Some(Provenance::For))?;
        let ens = out.as_ref().map(|(_, s)| ensemble(&base.theta_ref, s, alpha, eta)).transpose()?;
        let mut r = row(run, base, &prep, "MOX_MOMENTUM");
        r.alpha = Some(alpha);
        r.eta = Some(eta);
        run.record(r, base, &prep, ens.as_ref(), Some(Provenance::For))?;
    }
    Ok(())
}

fn direction_analysis(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let mut models: Vec<(&str, ParamStore)> = Vec::new();
    if let Some((mem, theta_for)) = mox_ce(run, base, &prep, None)? {
        let r = row(run, base, &prep, "MEM");
        run.record(r, base, &prep, Some(&mem), Some(Provenance::Mem))?;
        models.push(("MEM", mem));
        models.push(("FOR", theta_for));
    }
    for (method, variant) in [("NPO", Variant::Npo), ("GA", Variant::Ga)] {
        if let Some(theta) = baseline(run, base, &prep, method, variant)? {
            models.push((method, theta));
        }
    }
    let deltas = models
        .iter()
        .map(|(n, t)| Ok((*n, direction_delta(t, &base.theta_ref)?)))
        .collect::<Result<Vec<_>>>()?;
    for (a, da) in &deltas {
        for (b, db) in &deltas {
            let cosine = direction_cosine(da, db)?;
            run.manifest.cosines.push(CosineEntry { seed: base.seed, a: a.to_string(), b: b.to_string(), cosine });
        }
    }
    Ok(())
}

fn trajectory(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let (alpha, eta, epochs) = (run.cfg.alpha, run.cfg.eta, run.cfg.epochs);
    let mut curves: Vec<(&str, Option<Vec<ParamStore>>)> = Vec::new();
    for (method, variant) in [("GA", Variant::Ga), ("NPO", Variant::Npo)] {
        let spec = run.cfg.objective(variant);
        let out = train_from(run, base, method, &base.theta_ref, &forget_data(&prep), spec, epochs, None)?;
        curves.push((method, out.map(|(_, s)| s)));
    }
    let out = memorize_default(run, base, &prep)?;
    let snaps = out.map(|(_, s)| s);
    let single = snaps.as_ref().map(|s| s.iter().map(|m| mox_extrapolate(&base.theta_ref, m, alpha)).collect::<Result<Vec<_>>>()).transpose()?;
    let momentum = snaps
        .as_ref()
        .map(|s| (1..=s.len()).map(|k| ensemble(&base.theta_ref, &s[..k], alpha, eta)).collect::<Result<Vec<_>>>())
        .transpose()?;
    curves.push(("MOX", single));
    curves.push(("MOX_MOMENTUM", momentum));

    for (method, points) in curves {
        let mut r = row(run, base, &prep, method);
        r.epoch = Some(0);
        run.record(r, base, &prep, Some(&base.theta_ref), None)?;
        match points {
            Some(points) => {
                for (k, theta) in points.iter().enumerate() {
                    let mut r = row(run, base, &prep, method);
                    r.epoch = Some(k + 1);
                    if method.starts_with("MOX") {
                        r.alpha = Some(alpha);
                    }
                    if method == "MOX_MOMENTUM" {
                        r.eta = Some(eta);
                    }
                    let last = k + 1 == points.len();
                    let kind = if method.starts_with("MOX") { Provenance::For } else { Provenance::Baseline };
                    run.record(r, base, &prep, Some(theta), last.then_some(kind))?;
                }
            }
            None => {
                let r = row(run, base, &prep, method);
                run.record(r, base, &prep, None, None)?;
            }
        }
    }
    Ok(())
}

fn continual(run: &mut Run, base: &Base) -> Result<()> {
    let (stages, _) = split_stages(&base.corpus, &run.cfg.forget_ratios, base.seed)?;
    let heldout = split_by_ratio(&base.corpus, run.cfg.forget_ratio, base.seed)?.heldout_world;
    let (alpha, epochs) = (run.cfg.alpha, run.cfg.continual_epochs);
    let mut current: Vec<(&str, Option<ParamStore>)> =
        ["GA", "NPO", "MOX"].into_iter().map(|m| (m, Some(base.theta_ref.clone()))).collect();
    let mut forgotten: Vec<QAPair> = Vec::new();
    for (k, stage) in stages.iter().enumerate() {
        forgotten.extend(stage.iter().cloned());
        let gone: std::collections::BTreeSet<u32> = forgotten.iter().map(|p| p.fact.entity_id).collect();
        let retain: Vec<QAPair> = base.corpus.iter().filter(|p| !gone.contains(&p.fact.entity_id)).cloned().collect();
        let ratio = forgotten.len() as f64 / base.corpus.len() as f64;
        let split = DatasetSplit { retain: retain.clone(), forget: forgotten.clone(), heldout_world: heldout.clone(), forget_ratio: ratio };
        let prep = run.prepare(base, &format!("stage{}-s{}", k + 1, base.seed), split)?;
        let data = TrainData::new(&retain, stage);
        for (method, theta) in current.iter_mut() {
            let Some(anchor) = theta.take() else {
                let mut r = row(run, base, &prep, method);
                r.stage = Some(k + 1);
                run.record(r, base, &prep, None, None)?;
                continue;
            };
            let name = format!("{method}-stage{}", k + 1);
            let next = if *method == "MOX" {
                let spec = run.cfg.objective(Variant::MoxMemCe);
                train_from(run, base, &name, &anchor, &data, spec, epochs, None)?
                    .map(|(m, _)| mox_extrapolate(&anchor, &m, alpha))
                    .transpose()?
            } else {
                let variant = if *method == "GA" { Variant::Ga } else { Variant::Npo };
                train_from(run, base, &name, &anchor, &data, run.cfg.objective(variant), epochs, None)?.map(|(t, _)| t)
            };
            let next = next.map(|t| super::quantize(&t));
            let mut r = row(run, base, &prep, method);
            r.stage = Some(k + 1);
            if *method == "MOX" {
                r.alpha = Some(alpha);
            }
            let kind = if *method == "MOX" { Provenance::For } else { Provenance::Baseline };
            run.record(r, base, &prep, next.as_ref(), Some(kind))?;
            *theta = next;
        }
    }
    Ok(())
}

fn relearn(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let r = row(run, base, &prep, "REF");
    run.record_bundle(r, base, &prep, false)?;
    let mut unlearned: Vec<(&str, Option<ParamStore>)> = Vec::new();
    for (method, variant) in [("GA", Variant::Ga), ("NPO", Variant::Npo)] {
        let spec = run.cfg.objective(variant);
        let out = train_from(run, base, method, &base.theta_ref, &forget_data(&prep), spec, run.cfg.epochs, None)?;
        unlearned.push((method, out.map(|(t, _)| t)));
    }
    let mem = memorize_default(run, base, &prep)?;
    let theta = mem.map(|(m, _)| mox_extrapolate(&base.theta_ref, &m, run.cfg.alpha)).transpose()?;
    unlearned.push(("MOX", theta));

    let ce = run.cfg.objective(Variant::Ce);
    let relearn_data = TrainData::new(&prep.split.forget, &[]);
    for (method, theta) in unlearned {
        let alpha = (method == "MOX").then_some(run.cfg.alpha);
        let mut r = row(run, base, &prep, method);
        r.phase = "unlearned".into();
        r.alpha = alpha;
        let kind = if method == "MOX" { Provenance::For } else { Provenance::Baseline };
        run.record(r, base, &prep, theta.as_ref(), Some(kind))?;
        let relearned = match theta {
            Some(t) => {
                let start = super::quantize(&t);
                let (epochs, lr) = (run.cfg.relearn_epochs, run.cfg.relearn_lr);
                train_from(run, base, &format!("{method}-relearn"), &start, &relearn_data, ce, epochs, Some(lr))?.map(|(t, _)| t)
            }
            None => None,
        };
        let mut r = row(run, base, &prep, method);
        r.phase = "relearned".into();
        r.alpha = alpha;
        run.record(r, base, &prep, relearned.as_ref(), Some(Provenance::Baseline))?;
    }
    Ok(())
}

fn overlap(run: &mut Run, base: &Base) -> Result<()> {
    let split = split_overlap(&base.corpus, run.cfg.forget_ratio, base.seed)?;
    let prep = run.prepare(base, &format!("overlap-s{}", base.seed), split)?;
    let r = row(run, base, &prep, "REF");
    run.record_bundle(r, base, &prep, false)?;
    let r = row(run, base, &prep, "ORACLE");
    run.record_bundle(r, base, &prep, true)?;
    for (method, variant) in [("GA", Variant::Ga), ("GAD", Variant::Gad), ("NPO", Variant::Npo)] {
        baseline(run, base, &prep, method, variant)?;
    }
    mox_ce(run, base, &prep, Some(run.cfg.eta))?;
    Ok(())
}

fn motivation(run: &mut Run, base: &Base) -> Result<()> {
    let prep = default_split(run, base)?;
    let start_utility = heldout_utility(&base.model, &base.theta_ref, &prep.split.heldout_world)?;
    for beta in run.cfg.weighted_betas.clone() {
        for (method, variant) in [("WEIGHTED_GD", Variant::WeightedGd), ("WEIGHTED_GA", Variant::WeightedGa)] {
            let spec = run.cfg.objective(variant).with_beta(beta);
            let mut config = run.cfg.unlearn_config(spec, base.seed);
            config.epochs = run.cfg.motivation_epochs;
            let mut points = vec![CurvePoint {
                seed: base.seed,
                method: method.to_string(),
                beta,
                epoch: 0,
                heldout_utility: start_utility,
                divergence_from_ref: 0.0,
            }];
            let heldout = &prep.split.heldout_world;
            let model = &base.model;
            let name = format!("{method}-b{beta}-s{}", base.seed);
            let out = run.train(&name, model, &base.theta_ref, None, &forget_data(&prep), &config, |e, t| {
                points.push(CurvePoint {
                    seed: base.seed,
                    method: method.to_string(),
                    beta,
                    epoch: e + 1,
                    heldout_utility: heldout_utility(model, t, heldout)?,
                    divergence_from_ref: distance(t, &base.theta_ref)?,
                });
                Ok(())
            })?;
            run.manifest.curves.extend(points);
            let theta = match out {
                Trained::Done(t) => Some(t),
                Trained::Diverged => None,
            };
            let mut r = row(run, base, &prep, method);
            r.beta = Some(beta);
            run.record(r, base, &prep, theta.as_ref(), Some(Provenance::Baseline))?;
        }
    }
    let r = row(run, base, &prep, "REF");
    run.record_bundle(r, base, &prep, false)?;
    let out = memorize_default(run, base, &prep)?;
    let mem = out.map(|(m, _)| m);
    let r = row(run, base, &prep, "MEM");
    run.record(r, base, &prep, mem.as_ref(), Some(Provenance::Mem))?;
    let theta = mem.as_ref().map(|m| mox_extrapolate(&base.theta_ref, m, run.cfg.alpha)).transpose()?;
    let mut r = row(run, base, &prep, "MOX");
    r.alpha = Some(run.cfg.alpha);
    run.record(r, base, &prep, theta.as_ref(), Some(Provenance::For))?;
    Ok(())
}

fn to_csv<T: serde::Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for item in items {
        w.serialize(item).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

/// Columns: seed, a, b, cosine.
pub(super) fn cosines_csv(items: &[CosineEntry]) -> Result<Vec<u8>> {
    to_csv(items)
}

/// Columns: seed, method, beta, epoch, heldout_utility, divergence_from_ref.
pub(super) fn curves_csv(items: &[CurvePoint]) -> Result<Vec<u8>> {
    to_csv(items)
}
