// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Each step writes its reports into the output
//! directory and returns summary rows; `pipeline` chains the steps in one
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kneuron::attribution::{
    attribute_all, overlap_stats, read_refined_sets, refine_relation, write_attribution_tsv,
    write_map_binary, write_refined_sets, AttributionMap, FactAttributions, KnowledgeNeuronSet, Method,
    RefineConfig,
};
use kneuron::facts::{build_prompt_groups, generate_world, read_world, write_query_tsv, write_world, World};
use kneuron::intervention::{
    activation_study, intervention_study, random_controls, rank_prompts_by_activation, FactSubject, Mode,
    NeuronSource,
};
use kneuron::model::{load_checkpoint, save_checkpoint, TransformerWeights};
use kneuron::surgery::{
    append_edit_log, erase_relation, sample_update_requests, summarize_updates, update_fact,
    update_with_neurons, EditLogRecord, EditSession, EraseOutcome, EraseRequest, EvalSet, UpdateOutcome,
    UpdateRequest,
};
use kneuron::trainer::{evaluate, train as train_model};
use kneuron::vocab::ClozeQuery;
use kneuron::{KnError, Result};

use crate::config::Settings;
use crate::manifest::Manifest;
use crate::report::{num, write_tsv, Summary};
use crate::{Command, Common};

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodChoice {
    Ig,
    Baseline,
    Both,
}

/// Settings, output directory and manifest of one invocation.
struct Run {
    settings: Settings,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn new(name: &str, common: &Common, argv: &[String]) -> Result<Self> {
        let settings = Settings::resolve(common.config.as_deref(), &common.knobs)?;
        std::fs::create_dir_all(&common.out)?;
        let mut manifest = Manifest::new(name, argv, settings.echo());
        if let Some(c) = &common.config {
            manifest.input(c);
        }
        Ok(Self {
            settings,
            out: common.out.clone(),
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Path of a new output file, recorded in the manifest.
    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.manifest.output(&p);
        p
    }

    fn finish(mut self, summary: &Summary, summary_name: &str) -> Result<()> {
        let path = self.output(summary_name);
        summary.write(&path)?;
        self.manifest.write(&self.out)?;
        summary.print();
        Ok(())
    }
}

pub fn execute(command: Command, argv: &[String]) -> Result<()> {
    let jobs = match &command {
        Command::GenWorld { common }
        | Command::Train { common, .. }
        | Command::Attribute { common, .. }
        | Command::Stats { common, .. }
        | Command::Intervene { common, .. }
        | Command::ActivationStudy { common, .. }
        | Command::Update { common, .. }
        | Command::Erase { common, .. }
        | Command::Pipeline { common } => Settings::resolve(common.config.as_deref(), &common.knobs)?.get::<usize>("jobs")?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| KnError::Config(format!("worker pool: {e}")))?;
    pool.install(|| dispatch(command, argv))
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenWorld { common } => {
            let mut run = Run::new("gen-world", &common, argv)?;
            let (_, summary) = gen_world(&mut run)?;
            run.finish(&summary, "summary-gen-world.tsv")
        }
        Command::Train { world, common } => {
            let mut run = Run::new("train", &common, argv)?;
            run.manifest.input(&world);
            let w = read_world(&world)?;
            let (_, summary) = train(&mut run, &w)?;
            run.finish(&summary, "summary-train.tsv")
        }
        Command::Attribute { inputs, method, common } => {
            let mut run = Run::new("attribute", &common, argv)?;
            let (w, m) = load_inputs(&mut run, &inputs.world, &inputs.checkpoint)?;
            let (_, _, summary) = attribute(&mut run, &w, &m, method)?;
            run.finish(&summary, "summary-attribute.tsv")
        }
        Command::Stats { ig, baseline, common } => {
            let mut run = Run::new("stats", &common, argv)?;
            let ig_sets = read_sets(&mut run, &ig)?;
            let base = baseline.map(|b| read_sets(&mut run, &b)).transpose()?;
            let summary = stats(&mut run, &ig_sets, base.as_deref())?;
            run.finish(&summary, "summary-stats.tsv")
        }
        Command::Intervene { inputs, ig, baseline, common } => {
            let mut run = Run::new("intervene", &common, argv)?;
            let (w, m) = load_inputs(&mut run, &inputs.world, &inputs.checkpoint)?;
            let ig_sets = read_sets(&mut run, &ig)?;
            let base = baseline.map(|b| read_sets(&mut run, &b)).transpose()?;
            let known = known_facts(&w, &m)?;
            let summary = intervene(&mut run, &w, &m, &known, &ig_sets, base.as_deref())?;
            run.finish(&summary, "summary-intervene.tsv")
        }
        Command::ActivationStudy { inputs, ig, baseline, common } => {
            let mut run = Run::new("activation-study", &common, argv)?;
            let (w, m) = load_inputs(&mut run, &inputs.world, &inputs.checkpoint)?;
            let ig_sets = read_sets(&mut run, &ig)?;
            let base = baseline.map(|b| read_sets(&mut run, &b)).transpose()?;
            let known = known_facts(&w, &m)?;
            let summary = activation(&mut run, &w, &m, &known, &ig_sets, base.as_deref())?;
            run.finish(&summary, "summary-activation-study.tsv")
        }
        Command::Update {
            inputs,
            ig,
            fact,
            target,
            sample,
            in_place,
            dry_run,
            common,
        } => {
            let mut run = Run::new("update", &common, argv)?;
            let (w, mut m) = load_inputs(&mut run, &inputs.world, &inputs.checkpoint)?;
            let ig_sets = read_sets(&mut run, &ig)?;
            let summary = match (fact, target, sample) {
                (_, _, Some(n)) => update_study(&mut run, &w, &mut m, &ig_sets, n)?,
                (Some(f), Some(t), None) => {
                    let dest = checkpoint_dest(&run, &inputs.checkpoint, in_place, "model-updated.ckpt");
                    update_one(&mut run, &w, &mut m, &ig_sets, f, t, dry_run, &dest)?
                }
                _ => return Err(KnError::Request("update needs --fact and --target, or --sample".into())),
            };
            run.finish(&summary, "summary-update.tsv")
        }
        Command::Erase {
            inputs,
            ig,
            relation,
            study,
            in_place,
            dry_run,
            common,
        } => {
            let mut run = Run::new("erase", &common, argv)?;
            let (w, mut m) = load_inputs(&mut run, &inputs.world, &inputs.checkpoint)?;
            let ig_sets = read_sets(&mut run, &ig)?;
            let dest = checkpoint_dest(&run, &inputs.checkpoint, in_place, "model-erased.ckpt");
            let persist = (!study && !dry_run).then_some(dest.as_path());
            let summary = erase(&mut run, &w, &mut m, &ig_sets, &relation, study, persist)?;
            run.finish(&summary, "summary-erase.tsv")
        }
        Command::Pipeline { common } => {
            let mut run = Run::new("pipeline", &common, argv)?;
            let summary = pipeline(&mut run)?;
            run.finish(&summary, "summary.tsv")
        }
    }
}

/// gen-world, train, attribute, stats, intervene and activation-study.
/// Wall-clock seconds per step go to `timings.tsv`, kept apart from the
/// summary so that the summary is reproducible byte for byte.
fn pipeline(run: &mut Run) -> Result<Summary> {
    let mut summary = Summary::default();
    let mut timings: Vec<Vec<String>> = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |step: &str, timings: &mut Vec<Vec<String>>| {
        timings.push(vec![step.to_owned(), format!("{:.3}", clock.elapsed().as_secs_f64())]);
        clock = Instant::now();
    };
    let (world, s) = gen_world(run)?;
    summary.extend(s);
    lap("gen-world", &mut timings);
    let (weights, s) = train(run, &world)?;
    summary.extend(s);
    lap("train", &mut timings);
    let known = known_facts(&world, &weights)?;
    let (ig, base, s) = attribute(run, &world, &weights, MethodChoice::Both)?;
    summary.extend(s);
    lap("attribute", &mut timings);
    summary.extend(stats(run, &ig, Some(&base))?);
    lap("stats", &mut timings);
    summary.extend(intervene(run, &world, &weights, &known, &ig, Some(&base))?);
    lap("intervene", &mut timings);
    summary.extend(activation(run, &world, &weights, &known, &ig, Some(&base))?);
    lap("activation-study", &mut timings);
    write_tsv(&run.path("timings.tsv"), &["step", "seconds"], &timings)?;
    Ok(summary)
}

fn checkpoint_dest(run: &Run, input: &Path, in_place: bool, name: &str) -> PathBuf {
    if in_place { input.to_path_buf() } else { run.path(name) }
}

fn load_inputs(run: &mut Run, world: &Path, checkpoint: &Path) -> Result<(World, TransformerWeights)> {
    run.manifest.input(world);
    run.manifest.input(checkpoint);
    let w = read_world(world)?;
    let m = load_checkpoint(checkpoint)?;
    if m.config.vocab_size != w.vocab.len() {
        return Err(KnError::Contract(format!(
            "checkpoint vocabulary has {} tokens, the world has {}",
            m.config.vocab_size,
            w.vocab.len()
        )));
    }
    Ok((w, m))
}

fn read_sets(run: &mut Run, path: &Path) -> Result<Vec<KnowledgeNeuronSet>> {
    run.manifest.input(path);
    read_refined_sets(path)
}

fn known_facts(world: &World, weights: &TransformerWeights) -> Result<Vec<usize>> {
    Ok(evaluate(weights, &world.queries()?, &world.fact_relations())?.known_facts())
}

fn relation_name(world: &World, r: usize) -> &str {
    world.relations.get(r).map_or("?", |rel| rel.name.as_str())
}

fn gen_world(run: &mut Run) -> Result<(World, Summary)> {
    let world = generate_world(&run.settings.world()?)?;
    let queries = world.queries()?;
    write_world(&run.output("world.jsonl"), &world)?;
    write_query_tsv(&run.output("queries.tsv"), &world, &queries)?;
    let mut s = Summary::default();
    s.add("world", "relations", world.relations.len());
    s.add("world", "templates", world.templates.len());
    s.add("world", "entities", world.entities.len());
    s.add("world", "facts", world.facts.len());
    s.add("world", "queries", queries.len());
    s.add("world", "vocab_size", world.vocab.len());
    Ok((world, s))
}

fn train(run: &mut Run, world: &World) -> Result<(TransformerWeights, Summary)> {
    let cfg = run.settings.model(world.vocab.len())?;
    let tcfg = run.settings.train()?;
    let queries = world.queries()?;
    let mut weights = TransformerWeights::init(cfg)?;
    let mut progress = Vec::new();
    println!("step\tloss\tacc");
    let report = train_model(&mut weights, &queries, &world.fact_relations(), &tcfg, |p| {
        println!("{}\t{}\t{}", p.step, num(p.loss), num(p.accuracy));
        progress.push(vec![p.step.to_string(), num(p.loss), num(p.accuracy)]);
    })?;
    save_checkpoint(&run.output("model.ckpt"), &weights)?;
    write_tsv(&run.output("train_progress.tsv"), &["step", "loss", "acc"], &progress)?;
    let mut line = serde_json::to_string(&report)?;
    line.push('\n');
    std::fs::write(run.output("train_report.jsonl"), line)?;
    let eval = evaluate(&weights, &queries, &world.fact_relations())?;
    let rows: Vec<Vec<String>> = eval
        .queries
        .iter()
        .map(|q| {
            vec![
                q.fact.to_string(),
                q.template.to_string(),
                num(f64::from(q.answer_prob)),
                u8::from(q.correct).to_string(),
            ]
        })
        .collect();
    write_tsv(&run.output("eval_queries.tsv"), &["fact_id", "template_id", "answer_prob", "correct"], &rows)?;

    let mut s = Summary::default();
    s.add("train", "parameters", weights.parameter_count());
    s.add("train", "final_step", report.final_step);
    s.add_num("train", "final_loss", report.final_loss);
    s.add_num("train", "accuracy", report.accuracy);
    s.add_num("train", "perplexity", eval.overall.perplexity);
    s.add("train", "reached_target", report.reached_target);
    s.add("train", "known_facts", report.known_facts.len());
    for (r, acc) in &report.per_relation_accuracy {
        s.add_num("train", format!("accuracy.{}", relation_name(world, *r)), *acc);
    }
    s.add("train", "checkpoint_sha256", weights.digest());
    Ok((weights, s))
}

/// Groups maps by fact and relation, in fact order.
fn group_maps(world: &World, maps: Vec<AttributionMap>) -> BTreeMap<usize, Vec<FactAttributions>> {
    let mut by_fact: BTreeMap<usize, Vec<AttributionMap>> = BTreeMap::new();
    for m in maps {
        by_fact.entry(m.fact).or_default().push(m);
    }
    let mut out: BTreeMap<usize, Vec<FactAttributions>> = BTreeMap::new();
    for (fact, maps) in by_fact {
        let relation = world.facts[fact].relation;
        out.entry(relation).or_default().push(FactAttributions { fact, relation, maps });
    }
    out
}

fn refine_all(
    world: &World,
    maps: Vec<AttributionMap>,
    cfg: &RefineConfig,
    method: &str,
    rows: &mut Vec<Vec<String>>,
) -> Result<Vec<KnowledgeNeuronSet>> {
    let mut sets = Vec::new();
    for (r, facts) in group_maps(world, maps) {
        let rr = refine_relation(&facts, cfg)?;
        rows.push(vec![
            method.to_owned(),
            r.to_string(),
            relation_name(world, r).to_owned(),
            num(rr.p),
            num(f64::from(rr.t_fraction)),
            num(rr.avg_size),
            rr.iterations.to_string(),
            format!("{:?}", rr.stop).to_lowercase(),
        ]);
        sets.extend(rr.sets);
    }
    Ok(sets)
}

fn attribute(
    run: &mut Run,
    world: &World,
    weights: &TransformerWeights,
    method: MethodChoice,
) -> Result<(Vec<KnowledgeNeuronSet>, Vec<KnowledgeNeuronSet>, Summary)> {
    let known = known_facts(world, weights)?;
    if known.is_empty() {
        return Err(KnError::Contract("no fact is answered correctly on all its prompts".into()));
    }
    let queries: Vec<ClozeQuery> = world.queries_by_fact(&known)?.into_iter().flatten().collect();
    let refine = run.settings.refine()?;
    let ig_steps: usize = run.settings.get("ig_steps")?;
    let top_k: usize = run.settings.get("top_k")?;
    let mut rows = Vec::new();
    let mut s = Summary::default();
    s.add("attribute", "facts", known.len());
    s.add("attribute", "queries", queries.len());

    let mut ig_sets = Vec::new();
    if method != MethodChoice::Baseline {
        let path = run.settings.ig_path()?;
        let maps = attribute_all(weights, &queries, Method::Ig { steps: ig_steps, path })?;
        write_attribution_tsv(&run.output("attribution_ig.tsv"), &maps, top_k)?;
        if run.settings.get::<bool>("full_maps")? {
            write_map_binary(&run.output("attribution_ig.bin"), &maps)?;
        }
        let total: f64 = maps.iter().map(AttributionMap::total).sum::<f64>() / maps.len() as f64;
        s.add_num("attribute", "ig.mean_total_score", total);
        ig_sets = refine_all(world, maps, &refine, "ig", &mut rows)?;
        write_refined_sets(&run.output("refined_ig.jsonl"), &ig_sets)?;
    }
    let mut base_sets = Vec::new();
    if method != MethodChoice::Ig {
        let maps = attribute_all(weights, &queries, Method::Baseline)?;
        write_attribution_tsv(&run.output("attribution_baseline.tsv"), &maps, top_k)?;
        base_sets = refine_all(world, maps, &refine, "baseline", &mut rows)?;
        write_refined_sets(&run.output("refined_baseline.jsonl"), &base_sets)?;
    }
    for method in ["ig", "baseline"] {
        let of_method: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == method).collect();
        if of_method.is_empty() {
            continue;
        }
        let in_band = of_method.iter().filter(|r| r[7] == "inband").count();
        s.add("attribute", format!("{method}.relations_in_band"), in_band);
        s.add("attribute", format!("{method}.relations"), of_method.len());
    }
    write_tsv(
        &run.output("refinement.tsv"),
        &["method", "relation_id", "relation", "p", "t_fraction", "avg_size", "iterations", "stop"],
        &rows,
    )?;
    Ok((ig_sets, base_sets, s))
}

fn stats(run: &mut Run, ig: &[KnowledgeNeuronSet], baseline: Option<&[KnowledgeNeuronSet]>) -> Result<Summary> {
    let mut s = Summary::default();
    let mut rows = Vec::new();
    for (method, sets) in [("ig", Some(ig)), ("baseline", baseline)] {
        let Some(sets) = sets else { continue };
        let o = overlap_stats(sets);
        rows.push(vec![
            method.to_owned(),
            o.n_facts.to_string(),
            num(o.avg_size),
            num(o.intra),
            num(o.inter),
            o.intra_pairs.to_string(),
            o.inter_pairs.to_string(),
        ]);
        s.add_num("stats", format!("{method}.avg_size"), o.avg_size);
        s.add_num("stats", format!("{method}.intra"), o.intra);
        s.add_num("stats", format!("{method}.inter"), o.inter);
    }
    write_tsv(
        &run.output("overlap.tsv"),
        &["method", "facts", "avg_size", "intra", "inter", "intra_pairs", "inter_pairs"],
        &rows,
    )?;
    Ok(s)
}

fn by_fact(sets: &[KnowledgeNeuronSet]) -> BTreeMap<usize, KnowledgeNeuronSet> {
    sets.iter().map(|s| (s.fact, s.clone())).collect()
}

fn intervene(
    run: &mut Run,
    world: &World,
    weights: &TransformerWeights,
    known: &[usize],
    ig: &[KnowledgeNeuronSet],
    baseline: Option<&[KnowledgeNeuronSet]>,
) -> Result<Summary> {
    let ig_map = by_fact(ig);
    let base_map = baseline.map(by_fact).unwrap_or_default();
    let facts: Vec<usize> = known.iter().copied().filter(|f| ig_map.get(f).is_some_and(|s| !s.is_empty())).collect();
    let prompts = world.queries_by_fact(&facts)?;
    let subjects: Vec<FactSubject<'_>> = facts
        .iter()
        .zip(&prompts)
        .map(|(&f, p)| FactSubject {
            fact: f,
            relation: world.facts[f].relation,
            prompts: p,
            ig: &ig_map[&f],
            baseline: base_map.get(&f),
        })
        .collect();
    let digest = weights.digest();
    let rep = intervention_study(weights, &subjects, run.settings.seed()?)?;
    if weights.digest() != digest {
        return Err(KnError::Contract("intervention changed the weights".into()));
    }

    let rows: Vec<Vec<String>> = rep
        .relations
        .iter()
        .map(|r| {
            vec![
                r.relation.to_string(),
                relation_name(world, r.relation).to_owned(),
                r.mode.name().to_owned(),
                r.source.name().to_owned(),
                num(r.mean_rel_change),
                r.n_facts.to_string(),
            ]
        })
        .collect();
    write_tsv(
        &run.output("intervention.tsv"),
        &["relation_id", "relation", "mode", "method", "mean_rel_change", "n_facts"],
        &rows,
    )?;
    let plot: Vec<Vec<String>> = rep
        .relations
        .iter()
        .map(|r| {
            vec![
                relation_name(world, r.relation).to_owned(),
                format!("{}_{}", r.source.name(), r.mode.name()),
                num(r.mean_rel_change),
            ]
        })
        .collect();
    write_tsv(&run.output("intervention_plot.tsv"), &["x", "series", "y"], &plot)?;
    let detail: Vec<Vec<String>> = rep
        .facts
        .iter()
        .map(|f| {
            vec![
                f.fact.to_string(),
                f.relation.to_string(),
                f.source.name().to_owned(),
                f.mode.name().to_owned(),
                f.n_neurons.to_string(),
                num(f.before),
                num(f.after),
                num(f.rel_change),
                u8::from(f.included).to_string(),
            ]
        })
        .collect();
    write_tsv(
        &run.output("intervention_facts.tsv"),
        &["fact_id", "relation_id", "method", "mode", "n_neurons", "before", "after", "rel_change", "included"],
        &detail,
    )?;

    let mut s = Summary::default();
    s.add("intervene", "facts", rep.included(NeuronSource::Ig, Mode::Suppress).count());
    s.add("intervene", "excluded", rep.excluded);
    for source in [NeuronSource::Ig, NeuronSource::Random, NeuronSource::Baseline] {
        for mode in [Mode::Suppress, Mode::Amplify] {
            if rep.included(source, mode).next().is_some() {
                s.add_num(
                    "intervene",
                    format!("{}.{}", source.name(), mode.name()),
                    rep.mean_change(source, mode),
                );
            }
        }
    }
    let sign = rep.suppression_sign_test();
    s.add("intervene", "sign_test.negative", sign.negative);
    s.add("intervene", "sign_test.positive", sign.positive);
    s.add("intervene", "sign_test.p_value", format!("{:.3e}", sign.p_value));
    s.add_num("intervene", "opposite_direction_fraction", rep.opposite_direction_fraction());
    Ok(s)
}

fn activation(
    run: &mut Run,
    world: &World,
    weights: &TransformerWeights,
    known: &[usize],
    ig: &[KnowledgeNeuronSet],
    baseline: Option<&[KnowledgeNeuronSet]>,
) -> Result<Summary> {
    let ig_map = by_fact(ig);
    let base_map = baseline.map(by_fact);
    let facts: Vec<usize> = known.iter().copied().filter(|f| ig_map.get(f).is_some_and(|s| !s.is_empty())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.settings.seed()?);
    let groups = build_prompt_groups(world, &facts, run.settings.get("group_size")?, &mut rng)?;
    let rep = activation_study(weights, &groups, &ig_map, base_map.as_ref())?;

    let rows: Vec<Vec<String>> = rep
        .per_fact
        .iter()
        .map(|(f, src, g)| vec![f.to_string(), src.name().to_owned(), num(g.t1), num(g.t2), num(g.t3)])
        .collect();
    write_tsv(&run.output("activation.tsv"), &["fact_id", "method", "t1", "t2", "t3"], &rows)?;

    // Highest and lowest two prompts of each fact's pooled groups, and
    // whether a T1 prompt outranks a T3 prompt.
    let mut examples = Vec::new();
    let mut t1_first = 0usize;
    for g in &groups {
        let ids = ig_map[&g.fact].ids();
        let pool: Vec<(&str, &ClozeQuery)> = g
            .t1
            .iter()
            .map(|q| ("t1", q))
            .chain(g.t2.iter().map(|q| ("t2", q)))
            .chain(g.t3.iter().map(|q| ("t3", q)))
            .collect();
        let queries: Vec<ClozeQuery> = pool.iter().map(|(_, q)| (*q).clone()).collect();
        let ranked = rank_prompts_by_activation(weights, &ids, &queries)?;
        let n = ranked.len();
        for (rank, &(k, a)) in ranked.iter().enumerate() {
            if rank < 2 || rank + 2 >= n {
                examples.push(vec![
                    g.fact.to_string(),
                    (rank + 1).to_string(),
                    pool[k].0.to_owned(),
                    num(a),
                    world.vocab.decode(&pool[k].1.tokens),
                ]);
            }
        }
        let pair = [g.t1[0].clone(), g.t3[0].clone()];
        if rank_prompts_by_activation(weights, &ids, &pair)?[0].0 == 0 {
            t1_first += 1;
        }
    }
    write_tsv(
        &run.output("activation_examples.tsv"),
        &["fact_id", "rank", "group", "activation", "text"],
        &examples,
    )?;

    let mut s = Summary::default();
    s.add("activation", "facts", rep.n_facts);
    for (name, g) in [("ig", Some(rep.ig)), ("baseline", rep.baseline)] {
        let Some(g) = g else { continue };
        s.add_num("activation", format!("{name}.t1"), g.t1);
        s.add_num("activation", format!("{name}.t2"), g.t2);
        s.add_num("activation", format!("{name}.t3"), g.t3);
        s.add_num("activation", format!("{name}.separation"), g.separation());
    }
    s.add_num("activation", "t3_population", rep.t3_population);
    s.add_num("activation", "t1_above_t3_fraction", t1_first as f64 / groups.len().max(1) as f64);
    Ok(s)
}

fn update_row(o: &UpdateOutcome, world: &World, method: &str) -> Vec<String> {
    vec![
        o.fact.to_string(),
        world.facts[o.fact].relation.to_string(),
        method.to_owned(),
        o.target.to_string(),
        u8::from(o.changed).to_string(),
        u8::from(o.success).to_string(),
        u8::from(o.directional).to_string(),
        num(o.p_old.0),
        num(o.p_old.1),
        num(o.p_new.0),
        num(o.p_new.1),
        o.edited.len().to_string(),
        o.rows_changed.to_string(),
        num(o.intra.delta),
        num(o.inter.delta),
        num(o.intra.rel_delta),
        num(o.inter.rel_delta),
    ]
}

const UPDATE_HEADER: &[&str] = &[
    "fact_id",
    "relation_id",
    "method",
    "target",
    "changed",
    "success",
    "directional",
    "p_old_before",
    "p_old_after",
    "p_new_before",
    "p_new_after",
    "edited",
    "rows_changed",
    "intra_ppl_delta",
    "inter_ppl_delta",
    "intra_ppl_rel_delta",
    "inter_ppl_rel_delta",
];

fn update_request(run: &Run, fact: usize, target: usize) -> Result<UpdateRequest> {
    Ok(UpdateRequest {
        lambda1: run.settings.get("lambda1")?,
        lambda2: run.settings.get("lambda2")?,
        sharing_cap: run.settings.get("sharing_cap")?,
        ..UpdateRequest::new(fact, target)
    })
}

fn update_summary(s: &mut Summary, method: &str, outcomes: &[UpdateOutcome]) {
    let u = summarize_updates(outcomes);
    s.add("update", format!("{method}.facts"), u.n);
    s.add_num("update", format!("{method}.change_rate"), u.change_rate);
    s.add_num("update", format!("{method}.success_rate"), u.success_rate);
    s.add_num("update", format!("{method}.intra_ppl_delta"), u.intra_delta);
    s.add_num("update", format!("{method}.inter_ppl_delta"), u.inter_delta);
    s.add_num("update", format!("{method}.intra_ppl_rel_delta"), u.intra_rel_delta);
    s.add_num("update", format!("{method}.inter_ppl_rel_delta"), u.inter_rel_delta);
}

/// Updates `n` sampled known facts one at a time, undoing each edit, with a
/// layer-matched random-neuron control of the same size per fact.
fn update_study(
    run: &mut Run,
    world: &World,
    weights: &mut TransformerWeights,
    ig: &[KnowledgeNeuronSet],
    n: usize,
) -> Result<Summary> {
    let ig_map = by_fact(ig);
    let known = known_facts(world, weights)?;
    let candidates: Vec<usize> = known.into_iter().filter(|f| ig_map.get(f).is_some_and(|s| !s.is_empty())).collect();
    let seed = run.settings.seed()?;
    let stride: usize = run.settings.get("eval_stride")?;
    let digest = weights.digest();
    let (mut kn, mut rnd, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    let (mut local, mut restored) = (true, true);
    for base in sample_update_requests(world, &candidates, n, seed)? {
        let req = update_request(run, base.fact, base.target)?;
        let eval = EvalSet::for_fact(world, req.fact, stride)?;
        let mut session = EditSession::new();
        let o = update_fact(weights, world, &req, &ig_map[&req.fact], ig, &eval, &mut session)?;
        session.restore(weights)?;
        local &= o.rows_changed <= o.edited.len();
        restored &= weights.digest() == digest;
        rows.push(update_row(&o, world, "ig"));
        if !o.edited.is_empty() {
            let control = random_controls(&o.edited, weights.config.d_ffn, seed ^ (req.fact as u64) << 20)?;
            let r = update_with_neurons(weights, world, &req, &control[0], &eval, &mut session)?;
            session.restore(weights)?;
            restored &= weights.digest() == digest;
            rows.push(update_row(&r, world, "random"));
            rnd.push(r);
        }
        kn.push(o);
    }
    write_tsv(&run.output("update_outcomes.tsv"), UPDATE_HEADER, &rows)?;
    let mut s = Summary::default();
    update_summary(&mut s, "ig", &kn);
    update_summary(&mut s, "random", &rnd);
    let successes: Vec<&UpdateOutcome> = kn.iter().filter(|o| o.success).collect();
    s.add_num(
        "update",
        "ig.directional_given_success",
        successes.iter().filter(|o| o.directional).count() as f64 / successes.len().max(1) as f64,
    );
    s.add("update", "locality_ok", local);
    s.add("update", "undo_restores_checkpoint", restored);
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn update_one(
    run: &mut Run,
    world: &World,
    weights: &mut TransformerWeights,
    ig: &[KnowledgeNeuronSet],
    fact: usize,
    target: usize,
    dry_run: bool,
    dest: &Path,
) -> Result<Summary> {
    let req = update_request(run, fact, target)?;
    let set = ig
        .iter()
        .find(|s| s.fact == fact)
        .ok_or_else(|| KnError::Request(format!("no refined knowledge-neuron set for fact {fact}")))?;
    let eval = EvalSet::for_fact(world, fact, run.settings.get("eval_stride")?)?;
    let mut session = EditSession::new();
    let o = update_fact(weights, world, &req, set, ig, &eval, &mut session)?;
    write_tsv(&run.output("update_outcomes.tsv"), UPDATE_HEADER, &[update_row(&o, world, "ig")])?;
    let mut s = Summary::default();
    update_summary(&mut s, "ig", std::slice::from_ref(&o));
    s.add("update", "rows_changed", o.rows_changed);
    if !dry_run && !o.edited.is_empty() {
        save_checkpoint(dest, weights)?;
        run.manifest.output(dest);
        let mut rec = EditLogRecord::new("update", &o.edited);
        rec.lambda1 = Some(req.lambda1);
        rec.lambda2 = Some(req.lambda2);
        rec.summary.insert("fact".into(), fact as f64);
        rec.summary.insert("target".into(), target as f64);
        rec.summary.insert("success".into(), f64::from(u8::from(o.success)));
        rec.summary.insert("intra_ppl_delta".into(), o.intra.delta);
        rec.summary.insert("inter_ppl_delta".into(), o.inter.delta);
        append_edit_log(&run.path("edits.jsonl"), &rec)?;
        s.add("update", "checkpoint", dest.display());
    }
    Ok(s)
}

fn erase(
    run: &mut Run,
    world: &World,
    weights: &mut TransformerWeights,
    ig: &[KnowledgeNeuronSet],
    relations: &[usize],
    study: bool,
    persist: Option<&Path>,
) -> Result<Summary> {
    let budget: usize = run.settings.get("budget")?;
    let stride: usize = run.settings.get("eval_stride")?;
    let digest = weights.digest();
    let mut outcomes: Vec<EraseOutcome> = Vec::new();
    let mut restored = true;
    for &r in relations {
        let eval = EvalSet::for_relation(world, r, stride)?;
        let mut session = EditSession::new();
        let o = erase_relation(weights, world, &EraseRequest { relation: r, budget }, ig, &eval, &mut session)?;
        if study {
            session.restore(weights)?;
            restored &= weights.digest() == digest;
        }
        outcomes.push(o);
    }
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.relation.to_string(),
                relation_name(world, o.relation).to_owned(),
                o.edited.len().to_string(),
                o.rows_changed.to_string(),
                num(o.erased.before),
                num(o.erased.after),
                num(o.erased.rel_delta),
                num(o.others.before),
                num(o.others.after),
                num(o.others.rel_delta),
                num(o.specificity()),
            ]
        })
        .collect();
    write_tsv(
        &run.output("erase_outcomes.tsv"),
        &[
            "relation_id",
            "relation",
            "edited",
            "rows_changed",
            "erased_ppl_before",
            "erased_ppl_after",
            "erased_ppl_rel_delta",
            "other_ppl_before",
            "other_ppl_after",
            "other_ppl_rel_delta",
            "specificity",
        ],
        &rows,
    )?;
    let mut s = Summary::default();
    for o in &outcomes {
        let name = relation_name(world, o.relation);
        s.add_num("erase", format!("{name}.erased_ppl_rel_delta"), o.erased.rel_delta);
        s.add_num("erase", format!("{name}.other_ppl_rel_delta"), o.others.rel_delta);
    }
    let k = outcomes.len() as f64;
    let erased = outcomes.iter().map(|o| o.erased.rel_delta).sum::<f64>() / k;
    let others = outcomes.iter().map(|o| o.others.rel_delta).sum::<f64>() / k;
    s.add_num("erase", "mean_erased_ppl_rel_delta", erased);
    s.add_num("erase", "mean_other_ppl_rel_delta", others);
    s.add_num("erase", "specificity", erased / others);
    s.add_num(
        "erase",
        "mean_per_relation_specificity",
        outcomes.iter().map(EraseOutcome::specificity).sum::<f64>() / k,
    );
    if study {
        s.add("erase", "undo_restores_checkpoint", restored);
    } else if let Some(dest) = persist {
        save_checkpoint(dest, weights)?;
        run.manifest.output(dest);
        for o in &outcomes {
            let mut rec = EditLogRecord::new("erase", &o.edited);
            rec.budget = Some(budget);
            rec.summary.insert("relation".into(), o.relation as f64);
            rec.summary.insert("erased_ppl_rel_delta".into(), o.erased.rel_delta);
            rec.summary.insert("other_ppl_rel_delta".into(), o.others.rel_delta);
            append_edit_log(&run.path("edits.jsonl"), &rec)?;
        }
        s.add("erase", "checkpoint", dest.display());
    }
    Ok(s)
}
