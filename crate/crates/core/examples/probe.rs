use fairexp_core::cef::*;
use fairexp_core::fairness::*;
use fairexp_core::ingest::*;
use fairexp_core::matrices::*;
use fairexp_core::ranker::*;
use fairexp_core::synth::*;
use fairexp_core::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(60);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let cef_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(150);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(42);

    let scfg = SynthConfig {
        preference_strength: 1.0,
        ..SynthConfig::new(200, 500, 20, vec![3, 11], 5.0, seed)
    };
    let ds = synth_generate(&scfg).unwrap();
    let split = chronological_split(&ds.interactions, &ds.catalog, 5, 100, seed).unwrap();
    let groups = assign_groups(&split.train, &ds.catalog, 0.2).unwrap();
    let mats = build_matrices(&ds.quadruples, &ds.catalog, 5.0).unwrap();
    let mut model = init_model_with_hidden(MergeKind::Product, 20, 20, &[32, 16], seed);
    let tcfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let trace = train(&mut model, &mats, &split, &tcfg).unwrap();
    eprintln!("train loss: {:.4} -> {:.4}  ({:?})", trace[0], trace.last().unwrap(), t0.elapsed());

    let users: Vec<usize> = (0..200).collect();
    let cands: Vec<Vec<usize>> = (0..200).map(|u| split.test_candidates(u)).collect();
    let slate = top_k(&model, &mats, &users, &cands, 5);
    let m5 = evaluate_ranking(&slate, &split, &[5]).unwrap();
    eprintln!("NDCG@5 = {:.3}% (random ~4.76%), F1@5 = {:.3}%", m5[0].ndcg, m5[0].f1);
    let e0 = exposure(&slate, &groups).unwrap();
    eprintln!("exposure ({}, {}), ltr {:.3}", e0.g0, e0.g1, long_tail_rate(&slate, &groups).unwrap());

    let cfg = CefConfig { lambda, learning_rate: cef_lr, max_iters: iters, rel_tol: 1e-7, ..CefConfig::default() };
    let t1 = std::time::Instant::now();
    let report = explain_all(&model, &mats, &groups, &split, &cfg).unwrap();
    eprintln!("explain_all took {:?}", t1.elapsed());
    for e in report.explanations.iter().take(8) {
        eprintln!("  f{:<3} es={:+.5} validity={:+.5} prox={:.5} obj={:.5} iters={}", e.feature, e.es, e.validity, e.proximity, e.final_objective, e.iters_used);
    }
    let top2: Vec<usize> = report.ranked_features().into_iter().take(2).collect();
    eprintln!("top2 = {:?} (planted {:?})", top2, vec![3, 11]);
}
