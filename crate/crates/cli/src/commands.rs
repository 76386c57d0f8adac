use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dcgm::gradcheck::check_random_instance;
use dcgm::metrics::{smoothed_sentence_bleu, BLEU_ORDER};
use dcgm::rescore::{
    attach_sources, augment, build_nbest, mert, read_nbest, registry_of, rescore_nbest, write_nbest, FeatureProvider,
    ImportedProvider, ItemSource, ModelLogProbProvider, RawHypothesis,
};
use dcgm::retrieval::{
    build_reference_sets, ir_nbest, leave_one_out_bleu, mine_all, read_ratings, read_reference_sets, write_reference_sets,
    HypothesisSource,
};
use dcgm::text::{filter_triples, parse_triples, read_triples, tokenize, write_triples};
use dcgm::{
    bleu_stats, corpus_bleu, meteor_lite, train, BleuStats, Checkpoint, EncodedTriple, Error, Family, FeatureRegistry,
    FeatureSet, LogLinearWeights, MeteorConfig, Model, NBestList, ReferenceSet, Triple, TripleIndex, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::manifest::RunManifest;
use crate::settings::Settings;
use crate::{Cli, Command, ModelArgs, PipelineArgs};

pub enum Failure {
    Usage(anyhow::Error),
    Operational(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Operational(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Operational(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Operational(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn load_triples(path: &Path) -> anyhow::Result<Vec<Triple>> {
    read_triples(open(path)?).with_context(|| format!("reading {}", path.display()))
}

struct Ctx {
    settings: Settings,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, self.settings.entries(), self.settings.seed)
    }

    /// Records inputs, writes the manifest, then hands back the table sink.
    fn begin(&self, mut m: RunManifest, inputs: &[&Path], artifacts: &[&Path]) -> anyhow::Result<Box<dyn Write>> {
        for p in inputs {
            m.input(p)?;
        }
        for p in artifacts {
            m.artifact(p);
        }
        if let Some(o) = &self.out {
            m.artifact(o);
        }
        if let Some(path) = m.path(self.manifest.as_deref()) {
            m.write(&path).with_context(|| format!("writing manifest {}", path.display()))?;
        }
        Ok(match &self.out {
            Some(o) => Box::new(create(o)?),
            None => Box::new(BufWriter::new(io::stdout())),
        })
    }
}

pub fn run(cli: Cli) -> Outcome {
    let settings = Settings::load(cli.config.as_deref(), cli.seed).map_err(|e| Failure::Usage(e.into()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))?;
    }
    let ctx = Ctx { settings, out: cli.out, manifest: cli.manifest };
    match cli.command {
        Command::Ingest { corpus, triples, vocab } => ingest(&ctx, &corpus, &triples, &vocab),
        Command::Train { family, corpus, vocab, heldout, checkpoint, report } => {
            train_cmd(&ctx, family, &corpus, &vocab, heldout.as_deref(), &checkpoint, report.as_deref())
        }
        Command::BuildIndex { corpus, index } => build_index(&ctx, &corpus, &index),
        Command::MineRefs { index, items, ratings, refs } => mine_refs(&ctx, &index, &items, ratings.as_deref(), refs.as_deref()),
        Command::Nbest { items, features, index, import, model, nbest } => {
            nbest_cmd(&ctx, &items, features, index.as_deref(), import.as_deref(), &model, &nbest)
        }
        Command::Tune { nbest, refs, init, weights } => tune(&ctx, &nbest, &refs, init.as_deref(), &weights),
        Command::Rescore { nbest, weights, rescored } => rescore(&ctx, &nbest, &weights, &rescored),
        Command::Eval { nbest, refs, per_item } => eval(&ctx, &nbest, &refs, per_item),
        Command::Gradcheck { family, instances, vocab_size, hidden, encoder, eps, tolerance } => {
            gradcheck(&ctx, family, instances, vocab_size, hidden, &encoder, eps, tolerance)
        }
        Command::Pipeline(args) => pipeline(&ctx, &args),
        Command::Loo { refs, system, random_from } => loo(&ctx, &refs, system.as_deref(), random_from.as_deref()),
        Command::Repl { index, features, model, weights, k } => repl(&ctx, &index, features, &model, weights.as_deref(), k),
    }
}

fn ingest(ctx: &Ctx, corpus: &Path, triples_out: &Path, vocab_out: &Path) -> Outcome {
    let s = &ctx.settings;
    let (triples, errors) = parse_triples(open(corpus)?)?;
    for e in &errors {
        eprintln!("{}: {e}", corpus.display());
    }
    let lines = triples.len() + errors.len();
    if lines == 0 {
        return Err(Error::EmptyCorpus.into());
    }
    if errors.len() * 100 > lines {
        return Err(anyhow!("{} of {lines} lines malformed (limit 1%)", errors.len()).into());
    }
    let kept = filter_triples(&triples, s.min_bigram_count);
    if kept.is_empty() {
        return Err(anyhow!("no triple has a bigram seen more than {} times", s.min_bigram_count).into());
    }
    let vocab = Vocabulary::build(&kept, s.vocab_size);
    let mut table = ctx.begin(ctx.manifest("ingest"), &[corpus], &[triples_out, vocab_out])?;
    let mut w = create(triples_out)?;
    write_triples(&mut w, &kept)?;
    w.flush()?;
    let mut w = create(vocab_out)?;
    vocab.write(&mut w)?;
    w.flush()?;
    writeln!(table, "statistic\tvalue")?;
    writeln!(table, "lines\t{lines}")?;
    writeln!(table, "malformed\t{}", errors.len())?;
    writeln!(table, "triples_before\t{}", triples.len())?;
    writeln!(table, "triples_after\t{}", kept.len())?;
    writeln!(table, "vocabulary\t{}", vocab.len())?;
    table.flush()?;
    Ok(())
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    Vocabulary::read(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_model(args: &ModelArgs) -> anyhow::Result<Option<(Model, Vocabulary)>> {
    let (Some(ck), Some(v)) = (&args.checkpoint, &args.vocab) else {
        return Ok(None);
    };
    let vocab = load_vocab(v)?;
    let ck = Checkpoint::read(open(ck)?, &vocab).with_context(|| format!("reading {}", ck.display()))?;
    Ok(Some((ck.model, vocab)))
}

fn model_inputs(args: &ModelArgs) -> Vec<&Path> {
    args.checkpoint.iter().chain(args.vocab.iter()).map(PathBuf::as_path).collect()
}

fn train_cmd(
    ctx: &Ctx,
    family: Family,
    corpus: &Path,
    vocab_path: &Path,
    heldout: Option<&Path>,
    checkpoint: &Path,
    report: Option<&Path>,
) -> Outcome {
    let s = &ctx.settings;
    let vocab = load_vocab(vocab_path)?;
    let mut triples = load_triples(corpus)?;
    let held = match heldout {
        Some(h) => load_triples(h)?,
        None => {
            let n = (triples.len() as f64 * s.heldout_fraction).ceil() as usize;
            if n >= triples.len() && n > 0 {
                return Err(usage("heldout_fraction leaves no training triples"));
            }
            triples.split_off(triples.len() - n)
        }
    };
    let encode = |ts: &[Triple]| -> Vec<EncodedTriple> { ts.iter().map(|t| EncodedTriple::new(&vocab, t)).collect() };
    let (train_set, held_set) = (encode(&triples), encode(&held));

    let mut inputs = vec![corpus, vocab_path];
    inputs.extend(heldout);
    let mut artifacts = vec![checkpoint];
    artifacts.extend(report);
    let mut table = ctx.begin(ctx.manifest("train"), &inputs, &artifacts)?;

    let outcome = train(family, vocab.len(), vocab.counts(), &train_set, &held_set, &s.train)?;
    let mut w = create(checkpoint)?;
    Checkpoint::new(outcome.model, &vocab).write(&mut w)?;
    w.flush()?;
    if let Some(r) = report {
        let mut w = create(r)?;
        w.write_all(outcome.report.to_tsv().as_bytes())?;
        w.flush()?;
    }
    eprintln!("{}", outcome.report.summary());
    let rep = &outcome.report;
    let last = rep.epochs.last();
    writeln!(table, "family\tstop_epoch\treturned_epoch\tstop_reason\ttrain_ppl\theldout_ppl")?;
    writeln!(
        table,
        "{family}\t{}\t{}\t{:?}\t{}\t{}",
        rep.stop_epoch,
        rep.returned_epoch,
        rep.stop_reason,
        last.map(|e| e.train_nll.exp().to_string()).unwrap_or_else(|| "-".into()),
        last.and_then(|e| e.heldout_nll).map(|h| h.exp().to_string()).unwrap_or_else(|| "-".into()),
    )?;
    table.flush()?;
    Ok(())
}

fn build_index(ctx: &Ctx, corpus: &Path, index_out: &Path) -> Outcome {
    let s = &ctx.settings;
    let triples = load_triples(corpus)?;
    if triples.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let index = TripleIndex::with_params(triples, s.bm25_k1, s.bm25_b);
    let mut table = ctx.begin(ctx.manifest("build-index"), &[corpus], &[index_out])?;
    let mut w = create(index_out)?;
    index.write(&mut w)?;
    w.flush()?;
    writeln!(table, "documents\t{}", index.len())?;
    table.flush()?;
    Ok(())
}

fn load_index(path: &Path) -> anyhow::Result<TripleIndex> {
    TripleIndex::read(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn mine_refs(ctx: &Ctx, index_path: &Path, items_path: &Path, ratings: Option<&Path>, refs_out: Option<&Path>) -> Outcome {
    let s = &ctx.settings;
    let index = load_index(index_path)?;
    let items = load_triples(items_path)?;
    let mined = mine_all(&index, &items, &s.miner)?;
    let mut inputs = vec![index_path, items_path];
    inputs.extend(ratings);
    let mut table = ctx.begin(ctx.manifest("mine-refs"), &inputs, &refs_out.into_iter().collect::<Vec<_>>())?;
    match (ratings, refs_out) {
        (Some(r), Some(out)) => {
            let ratings = read_ratings(open(r)?)?;
            let sets = build_reference_sets(&items, &mined, &ratings, s.rating_threshold)?;
            let mut w = create(out)?;
            write_reference_sets(&mut w, &sets)?;
            w.flush()?;
            writeln!(table, "item\treferences")?;
            for set in &sets {
                writeln!(table, "{}\t{}", set.item, set.len())?;
            }
        }
        _ => {
            writeln!(table, "item\tcandidate\tscore\td_message\td_response\tresponse")?;
            for (item, cands) in items.iter().zip(&mined) {
                for c in cands {
                    writeln!(table, "{}\t{}\t{}\t{}\t{}\t{}", item.id, c.id, c.score, c.d_message, c.d_response, c.response.join(" "))?;
                }
            }
        }
    }
    table.flush()?;
    Ok(())
}

/// Retrieval candidates for `item`, skipping the item itself if indexed.
fn ir_candidates(index: &TripleIndex, item: &ItemSource, n: usize) -> dcgm::Result<Vec<RawHypothesis>> {
    Ok(ir_nbest(index, &item.message, n + 1)?
        .into_iter()
        .filter(|c| index.triples()[c.doc].id != item.id)
        .take(n)
        .map(|c| RawHypothesis { tokens: index.triples()[c.doc].response.clone(), ir_score: Some(c.score), imported: vec![] })
        .collect())
}

fn check_model_args(features: FeatureSet, model: &ModelArgs) -> Outcome {
    match (features.uses_model(), model.checkpoint.is_some()) {
        (true, false) => Err(usage(format!("feature set {features} needs --checkpoint and --vocab"))),
        (false, true) => Err(usage(format!("feature set {features} does not use a model"))),
        _ => Ok(()),
    }
}

fn nbest_cmd(
    ctx: &Ctx,
    items_path: &Path,
    features: FeatureSet,
    index_path: Option<&Path>,
    import: Option<&Path>,
    model_args: &ModelArgs,
    nbest_out: &Path,
) -> Outcome {
    check_model_args(features, model_args)?;
    match (features.uses_import(), import.is_some(), index_path.is_some()) {
        (true, false, _) => return Err(usage(format!("feature set {features} needs --import"))),
        (false, _, false) => return Err(usage(format!("feature set {features} needs --index"))),
        _ => {}
    }
    let items = load_triples(items_path)?;
    let loaded = load_model(model_args)?;
    let model = loaded.as_ref().map(|(model, vocab)| ModelLogProbProvider { model, vocab });

    let mut inputs = vec![items_path];
    inputs.extend(index_path);
    inputs.extend(import);
    inputs.extend(model_inputs(model_args));

    let (registry, lists) = if features.uses_import() {
        let path = import.expect("checked above");
        let (imported, mut lists) = read_nbest(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        attach_sources(&mut lists, &items)?;
        let boxed = features.providers(model, imported.names())?;
        let providers: Vec<&dyn FeatureProvider> = boxed.iter().map(|b| b.as_ref()).collect();
        (registry_of(&providers)?, augment(&lists, &providers)?)
    } else {
        let index = load_index(index_path.expect("checked above"))?;
        let boxed = features.providers(model, &[])?;
        let providers: Vec<&dyn FeatureProvider> = boxed.iter().map(|b| b.as_ref()).collect();
        let n = ctx.settings.nbest_size;
        let lists = items
            .par_iter()
            .map(|t| {
                let src = ItemSource::from(t);
                build_nbest(&providers, &src, &ir_candidates(&index, &src, n)?)
            })
            .collect::<dcgm::Result<Vec<_>>>()?;
        (registry_of(&providers)?, lists)
    };
    let mut table = ctx.begin(ctx.manifest("nbest"), &inputs, &[nbest_out])?;
    let mut w = create(nbest_out)?;
    write_nbest(&mut w, &registry, &lists)?;
    w.flush()?;
    writeln!(table, "items\thypotheses\tfeatures")?;
    writeln!(table, "{}\t{}\t{}", lists.len(), lists.iter().map(|l| l.hypotheses.len()).sum::<usize>(), registry.len())?;
    table.flush()?;
    Ok(())
}

fn load_nbest(path: &Path) -> anyhow::Result<(FeatureRegistry, Vec<NBestList>)> {
    read_nbest(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_refs(path: &Path) -> anyhow::Result<Vec<ReferenceSet>> {
    read_reference_sets(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_weights(path: Option<&Path>, registry: &FeatureRegistry) -> anyhow::Result<LogLinearWeights> {
    let w = match path {
        Some(p) => LogLinearWeights::read(open(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => LogLinearWeights::zeros(registry.clone()),
    };
    w.registry.ensure_same(registry)?;
    Ok(w)
}

fn save_weights(w: &LogLinearWeights, path: &Path) -> anyhow::Result<()> {
    let mut f = create(path)?;
    w.write(&mut f)?;
    f.flush()?;
    Ok(())
}

fn save_nbest(path: &Path, registry: &FeatureRegistry, lists: &[NBestList]) -> anyhow::Result<()> {
    let mut f = create(path)?;
    write_nbest(&mut f, registry, lists)?;
    f.flush()?;
    Ok(())
}

fn tune(ctx: &Ctx, nbest: &Path, refs: &Path, init: Option<&Path>, weights_out: &Path) -> Outcome {
    let (registry, lists) = load_nbest(nbest)?;
    let refsets = load_refs(refs)?;
    let w0 = load_weights(init, &registry)?;
    let mut inputs = vec![nbest, refs];
    inputs.extend(init);
    let mut table = ctx.begin(ctx.manifest("tune"), &inputs, &[weights_out])?;
    let outcome = mert(&lists, &registry, &refsets, &w0, &ctx.settings.mert)?;
    save_weights(&outcome.weights, weights_out)?;
    writeln!(table, "bleu_before\tbleu_after")?;
    writeln!(table, "{}\t{}", 100.0 * outcome.bleu_before, 100.0 * outcome.bleu_after)?;
    table.flush()?;
    Ok(())
}

fn rescore_all(lists: &[NBestList], registry: &FeatureRegistry, w: &LogLinearWeights) -> dcgm::Result<Vec<NBestList>> {
    lists.par_iter().map(|l| rescore_nbest(l, registry, w)).collect()
}

fn rescore(ctx: &Ctx, nbest: &Path, weights: &Path, rescored_out: &Path) -> Outcome {
    let (registry, lists) = load_nbest(nbest)?;
    let w = load_weights(Some(weights), &registry)?;
    let mut table = ctx.begin(ctx.manifest("rescore"), &[nbest, weights], &[rescored_out])?;
    let rescored = rescore_all(&lists, &registry, &w)?;
    save_nbest(rescored_out, &registry, &rescored)?;
    writeln!(table, "item\tscore\tresponse")?;
    for l in &rescored {
        let top = &l.hypotheses[0];
        writeln!(table, "{}\t{}\t{}", l.item, top.score, top.tokens.join(" "))?;
    }
    table.flush()?;
    Ok(())
}

struct ItemScore {
    item: String,
    sentence_bleu: f64,
    meteor: f64,
    hypothesis: Vec<String>,
}

struct Evaluation {
    stats: BleuStats,
    meteor: f64,
    items: Vec<ItemScore>,
}

/// Scores each list's first hypothesis; every list needs a reference set.
fn evaluate(lists: &[NBestList], refsets: &[ReferenceSet], cfg: &MeteorConfig) -> dcgm::Result<Evaluation> {
    let by_id: HashMap<&str, &ReferenceSet> = refsets.iter().map(|r| (r.item.as_str(), r)).collect();
    let mut stats = BleuStats::default();
    let mut items = Vec::with_capacity(lists.len());
    for l in lists {
        let refs = match by_id.get(l.item.as_str()) {
            Some(r) if !r.is_empty() => r.responses(),
            _ => return Err(Error::MissingReferences(l.item.clone())),
        };
        let hyp = l.hypotheses.first().map(|h| h.tokens.clone()).unwrap_or_default();
        let s = bleu_stats(&hyp, &refs);
        stats += s;
        items.push(ItemScore {
            item: l.item.clone(),
            sentence_bleu: smoothed_sentence_bleu(&s),
            meteor: meteor_lite(&hyp, &refs, cfg),
            hypothesis: hyp,
        });
    }
    let meteor = if items.is_empty() { 0.0 } else { items.iter().map(|i| i.meteor).sum::<f64>() / items.len() as f64 };
    Ok(Evaluation { stats, meteor, items })
}

fn write_evaluation(w: &mut dyn Write, e: &Evaluation, per_item: bool) -> io::Result<()> {
    if per_item {
        writeln!(w, "item\tsentence_bleu\tmeteor_lite\thypothesis")?;
        for i in &e.items {
            writeln!(w, "{}\t{}\t{}\t{}", i.item, 100.0 * i.sentence_bleu, i.meteor, i.hypothesis.join(" "))?;
        }
        return Ok(());
    }
    let p: Vec<String> = e.stats.precisions().iter().map(|p| p.map(|x| x.to_string()).unwrap_or_else(|| "-".into())).collect();
    let heads: Vec<String> = (1..=BLEU_ORDER).map(|n| format!("p{n}")).collect();
    writeln!(w, "bleu\t{}\tbp\thyp_len\tref_len\tmeteor_lite\titems", heads.join("\t"))?;
    writeln!(
        w,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        100.0 * corpus_bleu(&e.stats),
        p.join("\t"),
        e.stats.brevity_penalty(),
        e.stats.hyp_len,
        e.stats.ref_len,
        e.meteor,
        e.items.len()
    )
}

fn eval(ctx: &Ctx, nbest: &Path, refs: &Path, per_item: bool) -> Outcome {
    let (_, lists) = load_nbest(nbest)?;
    let refsets = load_refs(refs)?;
    let mut table = ctx.begin(ctx.manifest("eval"), &[nbest, refs], &[])?;
    let e = evaluate(&lists, &refsets, &ctx.settings.meteor)?;
    write_evaluation(&mut table, &e, per_item)?;
    table.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    ctx: &Ctx,
    family: Option<Family>,
    instances: usize,
    vocab: usize,
    hidden: usize,
    encoder: &[usize],
    eps: f64,
    tolerance: f64,
) -> Outcome {
    if encoder.last() != Some(&hidden) {
        return Err(usage("the last encoder layer must equal --hidden"));
    }
    if vocab <= 4 || instances == 0 {
        return Err(usage("--vocab-size must exceed the 4 reserved tokens and --instances must be positive"));
    }
    let mut table = ctx.begin(ctx.manifest("gradcheck"), &[], &[])?;
    let families: Vec<Family> = family.map(|f| vec![f]).unwrap_or_else(|| Family::ALL.to_vec());
    writeln!(table, "family\tinstances\tcomponents\tmax_rel_err\tpass")?;
    let mut failed = Vec::new();
    for f in families {
        let enc: &[usize] = if f == Family::Rlmt { &[] } else { encoder };
        let reports = (0..instances as u64)
            .into_par_iter()
            .map(|i| check_random_instance(f, vocab, hidden, enc, ctx.settings.seed.wrapping_add(i), eps))
            .collect::<dcgm::Result<Vec<_>>>()?;
        let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let checked: usize = reports.iter().map(|r| r.checked).sum();
        let pass = worst <= tolerance;
        if !pass {
            failed.push(f);
        }
        writeln!(table, "{f}\t{instances}\t{checked}\t{worst:e}\t{pass}")?;
    }
    table.flush()?;
    if !failed.is_empty() {
        return Err(anyhow!("gradient check failed for {failed:?}").into());
    }
    Ok(())
}

fn require_refs(lists: &[NBestList], refsets: &[ReferenceSet]) -> dcgm::Result<()> {
    let known: HashMap<&str, usize> = refsets.iter().map(|r| (r.item.as_str(), r.len())).collect();
    match lists.iter().find(|l| known.get(l.item.as_str()).copied().unwrap_or(0) == 0) {
        Some(l) => Err(Error::MissingReferences(l.item.clone())),
        None => Ok(()),
    }
}

/// Augment with model scores (optional), tune on one set, rescore the
/// other, report the other.
fn pipeline(ctx: &Ctx, a: &PipelineArgs) -> Outcome {
    let s = &ctx.settings;
    let (registry, mut tune_lists) = load_nbest(&a.tune_nbest)?;
    let (test_registry, mut test_lists) = load_nbest(&a.test_nbest)?;
    test_registry.ensure_same(&registry)?;
    let tune_refs = load_refs(&a.tune_refs)?;
    let test_refs = load_refs(&a.test_refs)?;
    require_refs(&tune_lists, &tune_refs)?;
    require_refs(&test_lists, &test_refs)?;

    let mut inputs: Vec<&Path> = vec![&a.tune_nbest, &a.tune_refs, &a.test_nbest, &a.test_refs];
    inputs.extend(a.tune_items.as_deref());
    inputs.extend(a.test_items.as_deref());
    inputs.extend(model_inputs(&a.model));
    inputs.extend(a.init.as_deref());
    let artifacts: Vec<&Path> = a.weights.iter().chain(a.rescored.iter()).map(PathBuf::as_path).collect();

    let loaded = load_model(&a.model)?;
    let registry = match &loaded {
        None => registry,
        Some((model, vocab)) => {
            let (Some(tune_items), Some(test_items)) = (&a.tune_items, &a.test_items) else {
                return Err(usage("augmenting with a model needs --tune-items and --test-items"));
            };
            attach_sources(&mut tune_lists, &load_triples(tune_items)?)?;
            attach_sources(&mut test_lists, &load_triples(test_items)?)?;
            let imported = ImportedProvider { names: registry.names().to_vec() };
            let lp = ModelLogProbProvider { model, vocab };
            let providers: [&dyn FeatureProvider; 2] = [&imported, &lp];
            let augmented = registry_of(&providers)?;
            tune_lists = augment(&tune_lists, &providers)?;
            test_lists = augment(&test_lists, &providers)?;
            augmented
        }
    };
    let w0 = load_weights(a.init.as_deref(), &registry)?;
    let mut table = ctx.begin(ctx.manifest("pipeline"), &inputs, &artifacts)?;

    let weights = if a.skip_tune {
        w0
    } else {
        let outcome = mert(&tune_lists, &registry, &tune_refs, &w0, &s.mert)?;
        eprintln!("tuning BLEU {} -> {}", 100.0 * outcome.bleu_before, 100.0 * outcome.bleu_after);
        outcome.weights
    };
    let rescored = rescore_all(&test_lists, &registry, &weights)?;
    if let Some(p) = &a.weights {
        save_weights(&weights, p)?;
    }
    if let Some(p) = &a.rescored {
        save_nbest(p, &registry, &rescored)?;
    }
    let e = evaluate(&rescored, &test_refs, &s.meteor)?;
    write_evaluation(&mut table, &e, false)?;
    table.flush()?;
    Ok(())
}

fn loo(ctx: &Ctx, refs: &Path, system: Option<&Path>, random_from: Option<&Path>) -> Outcome {
    let s = &ctx.settings;
    let sets = load_refs(refs)?;
    let mut inputs = vec![refs];
    inputs.extend(system);
    inputs.extend(random_from);
    let mut table = ctx.begin(ctx.manifest("loo"), &inputs, &[])?;
    let mut rows = vec![("human", leave_one_out_bleu(&sets, HypothesisSource::Human, s.loo_trials, s.seed)?)];
    if let Some(p) = system {
        let (_, lists) = load_nbest(p)?;
        let top: HashMap<&str, &[String]> =
            lists.iter().filter_map(|l| l.hypotheses.first().map(|h| (l.item.as_str(), h.tokens.as_slice()))).collect();
        let hyps = sets
            .iter()
            .map(|set| top.get(set.item.as_str()).map(|h| h.to_vec()).ok_or_else(|| Error::MissingReferences(set.item.clone())))
            .collect::<dcgm::Result<Vec<_>>>()?;
        rows.push(("system", leave_one_out_bleu(&sets, HypothesisSource::System(&hyps), s.loo_trials, s.seed)?));
    }
    if let Some(p) = random_from {
        let pool = load_triples(p)?;
        if pool.is_empty() {
            return Err(Error::EmptyCorpus.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let hyps: Vec<Vec<String>> = sets.iter().map(|_| pool[rng.gen_range(0..pool.len())].response.clone()).collect();
        rows.push(("random", leave_one_out_bleu(&sets, HypothesisSource::Random(&hyps), s.loo_trials, s.seed)?));
    }
    writeln!(table, "source\tmean_bleu\ttrials\titems\texcluded")?;
    for (name, r) in rows {
        writeln!(table, "{name}\t{}\t{}\t{}\t{}", 100.0 * r.mean_bleu, r.trials, r.items, r.excluded)?;
    }
    table.flush()?;
    Ok(())
}

fn print_list(w: &mut dyn Write, title: &str, registry: &FeatureRegistry, list: &NBestList) -> io::Result<()> {
    writeln!(w, "{title}")?;
    writeln!(w, "rank\tscore\t{}\tresponse", registry.names().join("\t"))?;
    for (i, h) in list.hypotheses.iter().enumerate() {
        let f: Vec<String> = h.features.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}\t{}\t{}\t{}", i + 1, h.score, f.join("\t"), h.tokens.join(" "))?;
    }
    Ok(())
}

fn prompt(label: &str, input: &mut impl BufRead) -> io::Result<Option<String>> {
    print!("{label}> ");
    io::stdout().flush()?;
    let mut line = String::new();
    Ok(if input.read_line(&mut line)? == 0 { None } else { Some(line) })
}

fn repl(ctx: &Ctx, index_path: &Path, features: FeatureSet, model_args: &ModelArgs, weights: Option<&Path>, k: usize) -> Outcome {
    check_model_args(features, model_args)?;
    if features.uses_import() {
        return Err(usage(format!("feature set {features} needs imported features and cannot be used interactively")));
    }
    if k == 0 {
        return Err(usage("-k must be positive"));
    }
    let index = load_index(index_path)?;
    let loaded = load_model(model_args)?;
    let model = loaded.as_ref().map(|(model, vocab)| ModelLogProbProvider { model, vocab });
    let boxed = features.providers(model, &[])?;
    let providers: Vec<&dyn FeatureProvider> = boxed.iter().map(|b| b.as_ref()).collect();
    let registry = registry_of(&providers)?;
    let w = load_weights(weights, &registry)?;
    let mut inputs = vec![index_path];
    inputs.extend(model_inputs(model_args));
    inputs.extend(weights);
    drop(ctx.begin(ctx.manifest("repl"), &inputs, &[])?);

    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut out = io::stdout();
    while let Some(context) = prompt("context", &mut input)? {
        let message = loop {
            match prompt("message", &mut input)? {
                None => return Ok(()),
                Some(m) if tokenize(&m).is_empty() => continue,
                Some(m) => break tokenize(&m),
            }
        };
        let src = ItemSource { id: "query".into(), context: tokenize(&context), message };
        let result = ir_candidates(&index, &src, k)
            .and_then(|raw| build_nbest(&providers, &src, &raw))
            .and_then(|list| Ok((rescore_nbest(&list, &registry, &w)?, list)));
        match result {
            Ok((rescored, first)) => {
                print_list(&mut out, "retrieved", &registry, &first)?;
                print_list(&mut out, "rescored", &registry, &rescored)?;
            }
            Err(e) => eprintln!("error: {e}"),
        }
        out.flush()?;
    }
    Ok(())
}
