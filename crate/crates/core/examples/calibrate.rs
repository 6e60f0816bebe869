//! Calibration scratchpad for the acceptance manifest: trains the
//! reference stages (caching checkpoints under the system temp dir)
//! and prints the numbers the frozen bounds are derived from.
//!
//! Usage: `cargo run --example calibrate [s1_steps] [s2_steps] [n_sources] [s3_steps]`

use std::collections::BTreeMap;
use bookcast::corpus::UtteranceKind;
use bookcast::distill::{
    cell_name, filter_candidates, full_grid, synthesize_candidates, DistillSpec, FilterThresholds,
};
use bookcast::eval::{split_corpus, stage1_records, stage2_records};
use bookcast::model::{
    init_model, load_checkpoint, save_checkpoint, train_stage, ModelCheckpoint, ModelConfig,
    TrainConfig,
};
use bookcast::oracle::{make_corpus, CorpusSpec, WorldConfig};

fn main() {
    let s1_steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let s2_steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(900);
    let cache = std::env::temp_dir().join("bookcast-calib");
    std::fs::create_dir_all(&cache).unwrap();

    let world = WorldConfig::with_seed(0);
    let spec = CorpusSpec::new(40, 50, 4);
    let corpus = make_corpus(&spec, &world).unwrap();
    let (train, held_out) = split_corpus(&corpus, 4).unwrap();

    let s1_path = cache.join(format!("stage1_{s1_steps}.ckpt"));
    let ckpt = if s1_path.exists() {
        load_checkpoint(&s1_path).unwrap()
    } else {
        let t = std::time::Instant::now();
        let data = stage1_records(&train).unwrap();
        let held = stage1_records(&held_out).unwrap();
        let mut ckpt = init_model(&ModelConfig { seed: 0, ..ModelConfig::default() }).unwrap();
        let mut cfg = TrainConfig::for_stage(1);
        cfg.steps = s1_steps;
        cfg.batch_size = 16;
        let rep = train_stage(&mut ckpt, &data, &held, &cfg).unwrap();
        let last_held = rep.log.iter().rev().find_map(|e| e.held_out_loss);
        println!(
            "stage1 {s1_steps} steps in {:.1}s: initial {:.4} final {:.4} held_out {:?} ratio {:?}",
            t.elapsed().as_secs_f64(),
            rep.initial_loss,
            rep.final_loss,
            last_held,
            last_held.map(|h| h / rep.initial_loss)
        );
        for e in &rep.log {
            if e.held_out_loss.is_some() {
                println!("  step {} train {:.4} held {:?}", e.step, e.train_loss, e.held_out_loss);
            }
        }
        save_checkpoint(&ckpt, &s1_path).unwrap();
        ckpt
    };

    let s2_path = cache.join(format!("stage2_{s1_steps}_{s2_steps}.ckpt"));
    let ckpt: ModelCheckpoint = if s2_path.exists() {
        load_checkpoint(&s2_path).unwrap()
    } else {
        let t = std::time::Instant::now();
        let data = stage2_records(&train, 1, 1).unwrap();
        let held = stage2_records(&held_out, 1, 1).unwrap();
        let mut ckpt = ckpt;
        let mut cfg = TrainConfig::for_stage(2);
        cfg.steps = s2_steps;
        cfg.batch_size = 16;
        let rep = train_stage(&mut ckpt, &data, &held, &cfg).unwrap();
        let last_held = rep.log.iter().rev().find_map(|e| e.held_out_loss);
        println!(
            "stage2 {s2_steps} steps in {:.1}s: initial {:.4} final {:.4} held_out {:?}",
            t.elapsed().as_secs_f64(),
            rep.initial_loss,
            rep.final_loss,
            last_held
        );
        save_checkpoint(&ckpt, &s2_path).unwrap();
        ckpt
    };

    // distillation audit
    let n_sources: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(60);
    let source_ids: Vec<u64> = train
        .utterances()
        .filter(|u| u.kind == UtteranceKind::Dialogue)
        .map(|u| u.id)
        .take(n_sources)
        .collect();
    let dspec = DistillSpec { source_ids, grid: full_grid(), samples_per_cell: 2, seed: 0 };
    let t = std::time::Instant::now();
    let cands = synthesize_candidates(&ckpt, &train, &dspec).unwrap();
    println!("synthesized {} candidates in {:.1}s", cands.len(), t.elapsed().as_secs_f64());
    let filtered = filter_candidates(&cands, &FilterThresholds::default(), &train).unwrap();

    let mut per_cell: BTreeMap<String, Vec<&bookcast::distill::DistilledSample>> = BTreeMap::new();
    for s in &filtered {
        per_cell.entry(cell_name(&(s.attrs.primary_label(), s.attrs.intensity))).or_default().push(s);
    }
    for (name, ss) in &per_cell {
        let kept = ss.iter().filter(|s| s.kept).count();
        let mut pers: Vec<f64> = ss.iter().map(|s| s.per).collect();
        pers.sort_by(f64::total_cmp);
        let q = |p: f64| pers[((pers.len() - 1) as f64 * p) as usize];
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        for s in ss.iter().filter(|s| !s.kept) {
            *reasons.entry(format!("{:?}", s.reject_reason.unwrap())).or_default() += 1;
        }
        println!(
            "cell {name:12} kept {kept:3}/{:3}  per p25 {:.3} p50 {:.3} p75 {:.3}  rejects {:?}",
            ss.len(),
            q(0.25),
            q(0.5),
            q(0.75),
            reasons
        );
    }

    // stage 3 over the balanced distilled set
    let s3_steps: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(50);
    let target: Vec<_> = full_grid().into_iter().map(|c| (c, 40)).collect();
    let (s3_data, _balanced, audit) = bookcast::distill::run_distillation(
        &ckpt,
        &train,
        &dspec,
        &FilterThresholds::default(),
        &target,
    )
    .unwrap();
    println!("audit: kept {} of {}", audit.kept, audit.synthesized);
    let stage2 = ckpt.clone();
    let mut ckpt = ckpt;
    let mut cfg3 = TrainConfig::for_stage(3);
    cfg3.steps = s3_steps;
    cfg3.batch_size = 16;
    let held2 = stage2_records(&held_out, 1, 1).unwrap();
    let t = std::time::Instant::now();
    let rep = train_stage(&mut ckpt, &s3_data, &held2, &cfg3).unwrap();
    println!(
        "stage3 {s3_steps} steps in {:.1}s: final {:.4}",
        t.elapsed().as_secs_f64(),
        rep.final_loss
    );

    // downstream metrics on held-out dialogue
    use bookcast::eval::{
        carry_position_accuracy, intensity_delta, pipeline_run, text_related_rate, PipelineSource,
    };
    use bookcast::sequence::InferenceMode;
    let laugh = bookcast::corpus::TextToken(held_out.meta.laugh_marker);
    let dia_ids: Vec<u64> = held_out
        .chapters
        .iter()
        .flat_map(|ch| {
            ch.utterances
                .iter()
                .enumerate()
                .filter(|(i, u)| {
                    u.kind == UtteranceKind::Dialogue
                        && u.attributes.emotions.len() == 1
                        && !ch.pre_context_has_laugh(*i, laugh)
                })
                .map(|(_, u)| u.id)
                .collect::<Vec<_>>()
        })
        .take(24)
        .collect();
    let all_ids: Vec<u64> = held_out.utterances().map(|u| u.id).collect();
    let t = std::time::Instant::now();
    let plain = carry_position_accuracy(&stage2, &held_out, &all_ids, InferenceMode::Plain, 1, 1).unwrap();
    let ctx = carry_position_accuracy(&stage2, &held_out, &all_ids, InferenceMode::Ctx, 1, 1).unwrap();
    println!("carry plain {plain:?} ctx {ctx:?} ({:.1}s)", t.elapsed().as_secs_f64());
    let t = std::time::Instant::now();
    let d2 = intensity_delta(&stage2, &held_out, &dia_ids).unwrap();
    let d3 = intensity_delta(&ckpt, &held_out, &dia_ids).unwrap();
    println!("delta stage2 {d2:?}");
    println!("delta stage3 {d3:?} ({:.1}s)", t.elapsed().as_secs_f64());
    let trr = text_related_rate(&ckpt, &held_out, &dia_ids).unwrap();
    println!("text_related_rate {trr:.4}");

    // end-to-end pipeline on generated fiction
    let novel = bookcast::extract::mini_novel(0, 3, 40);
    let personas = vec![
        bookcast::corpus::Persona::named(0, "NARRATOR"),
        bookcast::corpus::Persona::named(1, "Tom"),
        bookcast::corpus::Persona::named(2, "Mary"),
        bookcast::corpus::Persona::named(3, "Ann"),
        bookcast::corpus::Persona::named(4, "UNKNOWN"),
    ];
    let dir = tempfile::tempdir().unwrap();
    let t = std::time::Instant::now();
    let out = pipeline_run(
        PipelineSource::Fiction { text: novel, personas },
        &ckpt,
        &world,
        None,
        dir.path(),
    )
    .unwrap();
    println!("pipeline chapter_per {:?} ({:.1}s)", out.chapter_per, t.elapsed().as_secs_f64());

    // same pipeline fed the held-out synthetic corpus, to separate
    // fiction-extraction distribution shift from model quality
    let dir2 = tempfile::tempdir().unwrap();
    let out2 = pipeline_run(
        PipelineSource::Corpus(held_out.clone()),
        &ckpt,
        &world,
        None,
        dir2.path(),
    )
    .unwrap();
    println!("pipeline (held-out corpus) chapter_per {:?}", out2.chapter_per);

    // per-utterance error buckets on both routes
    use bookcast::oracle::proxy_per;
    for (tag, o) in [("held-out", &out2), ("fiction", &out)] {
        let mut buckets: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let laugh_o = bookcast::corpus::TextToken(o.corpus.meta.laugh_marker);
        for (cid, toks) in &o.chapter_tokens {
            let ch = o.corpus.chapters.iter().find(|c| c.id == *cid).unwrap();
            for (i, u) in ch.utterances.iter().enumerate() {
                let carry = ch.pre_context_has_laugh(i, laugh_o);
                let per =
                    proxy_per(&toks[i], &u.text, u.speaker_id, &u.attributes, carry, &o.corpus.meta);
                let key = format!(
                    "{:?} spk={} carry={} mixed={} int={:?} emo={:?}",
                    u.kind,
                    u.speaker_id,
                    carry,
                    u.attributes.emotions.len() > 1,
                    u.attributes.intensity,
                    u.attributes.primary_label(),
                );
                let e = buckets.entry(key).or_insert((0.0, 0));
                e.0 += per;
                e.1 += 1;
            }
        }
        for (k, (sum, n)) in &buckets {
            println!("{tag} bucket {k:60} mean_per {:.3} n {n}", sum / *n as f64);
        }
    }
}
