//! The five pipeline stages. Every stage reads only checkpoint files
//! plus the resolved config, writes deterministic artifacts into the
//! output directory, and embeds the resolved config in everything it
//! writes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use fairexp_core::baselines::{
    efm_average_ranking, popularity_ranking, random_ranking, shapley_ranking, BaselineRanking,
    MatrixSide,
};
use fairexp_core::cef::explain_all;
use fairexp_core::erasure::{curve_plot_csv, erase_and_eval, tradeoff_curve, TradeoffPoint};
use fairexp_core::error::{Error, Result};
use fairexp_core::ingest::{
    assign_groups, chronological_split, filter_min_reviews, parse_interactions, parse_quadruples,
    Catalog, DatasetSplit, GroupAssignment,
};
use fairexp_core::matrices::{build_matrices, load_matrices, save_matrices, FeatureMatrices};
use fairexp_core::ranker::{init_model_with_hidden, load_model, save_model, RankerModel};
use fairexp_core::synth::synth_generate;
use fairexp_core::train::train;

use crate::config::{Meta, RunConfig};

pub const RUN_META: &str = "run_meta.json";
pub const CATALOG: &str = "catalog.json";
pub const SPLIT: &str = "split.json";
pub const GROUPS: &str = "groups.json";
pub const MATRICES: &str = "matrices.bin";
pub const MODEL: &str = "model.bin";
pub const LOSS_TRACE: &str = "loss_trace.json";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const TRADEOFF_JSON: &str = "tradeoff.json";
pub const CURVE_CSV: &str = "curve.csv";
pub const CURVE_JSON: &str = "curve.json";

pub fn explain_artifact_name(method: &str) -> String {
    format!("explain_{}.json", method.replace('-', "_"))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("bad {}: {e}", path.display())))
}

fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::data(format!(
            "missing upstream artifact {}; run `fairexp {produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

/// CSV prologue carrying the provenance block as comment lines.
fn csv_meta_comment(meta: &Meta) -> String {
    let config = serde_json::to_string(&meta.config).expect("config serializes");
    format!(
        "# version: {}\n# config_hash: {}\n# config: {}\n",
        meta.version, meta.config_hash, config
    )
}

#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    meta: Meta,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct CatalogArtifact {
    catalog: Catalog,
}

#[derive(Serialize, Deserialize)]
struct SplitArtifact {
    split: DatasetSplit,
}

#[derive(Serialize, Deserialize)]
struct GroupsArtifact {
    groups: GroupAssignment,
}

#[derive(Serialize, Deserialize)]
struct TraceArtifact {
    loss_trace: Vec<f64>,
}

/// One entry of an explanation ranking (shared schema across methods).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature_id: usize,
    pub feature_name: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proximity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub es: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct ExplainArtifact {
    pub meta: Meta,
    pub method: String,
    pub beta: f64,
    pub ranking: Vec<RankedFeature>,
    #[serde(default)]
    pub failures: Vec<(usize, String)>,
}

/// Verify that this stage's config matches the config the data artifacts
/// were produced with.
pub fn check_config_consistency(cfg: &RunConfig, allow_mismatch: bool) -> Result<()> {
    let path = cfg.out_dir.join(RUN_META);
    require_artifact(&path, "ingest")?;
    let upstream: Meta = read_json(&path)?;
    if upstream.data_hash() != cfg.meta().data_hash() {
        let message = format!(
            "config mismatch: data-defining fields changed since ingest \
             (artifact hash {}, current {})",
            upstream.data_hash(),
            cfg.meta().data_hash()
        );
        if allow_mismatch {
            eprintln!("warning: {message} (continuing; --allow-config-mismatch)");
        } else {
            return Err(Error::data(format!(
                "{message}; pass --allow-config-mismatch to proceed anyway"
            )));
        }
    }
    Ok(())
}

fn load_data_artifacts(
    cfg: &RunConfig,
) -> Result<(Catalog, DatasetSplit, GroupAssignment, FeatureMatrices)> {
    let dir = &cfg.out_dir;
    for (name, stage) in [
        (CATALOG, "ingest"),
        (SPLIT, "ingest"),
        (GROUPS, "ingest"),
        (MATRICES, "ingest"),
    ] {
        require_artifact(&dir.join(name), stage)?;
    }
    let catalog: Wrapped<CatalogArtifact> = read_json(&dir.join(CATALOG))?;
    let split: Wrapped<SplitArtifact> = read_json(&dir.join(SPLIT))?;
    let groups: Wrapped<GroupsArtifact> = read_json(&dir.join(GROUPS))?;
    let mats = load_matrices(&dir.join(MATRICES))?;
    Ok((
        catalog.body.catalog,
        split.body.split,
        groups.body.groups,
        mats,
    ))
}

/// Stage 1: parse (or synthesize), filter, split, group, and build the
/// feature matrices.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let meta = cfg.meta();

    let (interactions, quadruples, catalog, filtered) = match &cfg.data.synthetic {
        Some(synth_cfg) => {
            let ds = synth_generate(synth_cfg)?;
            // Synthetic catalogs are dense by construction; the sparsity
            // filter is skipped so zero-interaction items stay rankable.
            write_text(
                &cfg.out_dir.join("interactions.tsv"),
                &ds.interactions_tsv(),
            )?;
            write_text(&cfg.out_dir.join("quadruples.tsv"), &ds.quadruples_tsv())?;
            (ds.interactions, ds.quadruples, ds.catalog, false)
        }
        None => {
            let interactions_path = cfg.data.interactions.as_ref().ok_or_else(|| {
                Error::data("no interactions path configured and synthetic mode is off")
            })?;
            let quadruples_path = cfg.data.quadruples.as_ref().ok_or_else(|| {
                Error::data("no quadruples path configured and synthetic mode is off")
            })?;
            let interactions = parse_interactions(interactions_path, cfg.data.format)?;
            let quadruples = parse_quadruples(quadruples_path, cfg.data.format)?;
            let (i, q, c) = filter_min_reviews(&interactions, &quadruples, cfg.min_reviews)?;
            (i, q, c, true)
        }
    };
    if filtered {
        eprintln!(
            "ingest: {} users, {} items, {} features after filtering",
            catalog.num_users(),
            catalog.num_items(),
            catalog.num_features()
        );
    } else {
        eprintln!(
            "ingest: synthetic dataset with {} users, {} items, {} features",
            catalog.num_users(),
            catalog.num_items(),
            catalog.num_features()
        );
    }

    let split = chronological_split(
        &interactions,
        &catalog,
        cfg.holdout,
        cfg.negatives,
        cfg.split_seed(),
    )?;
    let groups = assign_groups(&split.train, &catalog, cfg.top_fraction)?;
    let mats = build_matrices(&quadruples, &catalog, cfg.rating_scale)?;

    write_json(&cfg.out_dir.join(RUN_META), &meta)?;
    write_json(
        &cfg.out_dir.join(CATALOG),
        &Wrapped {
            meta: meta.clone(),
            body: CatalogArtifact { catalog },
        },
    )?;
    write_json(
        &cfg.out_dir.join(SPLIT),
        &Wrapped {
            meta: meta.clone(),
            body: SplitArtifact { split },
        },
    )?;
    write_json(
        &cfg.out_dir.join(GROUPS),
        &Wrapped {
            meta: meta.clone(),
            body: GroupsArtifact { groups },
        },
    )?;
    save_matrices(
        &cfg.out_dir.join(MATRICES),
        &mats,
        serde_json::to_value(&meta).expect("meta serializes"),
    )?;
    eprintln!("ingest: artifacts written to {}", cfg.out_dir.display());
    Ok(())
}

/// Stage 2: train the ranker on the persisted split and matrices.
pub fn cmd_train(cfg: &RunConfig, allow_mismatch: bool) -> Result<()> {
    check_config_consistency(cfg, allow_mismatch)?;
    let (_, split, _, mats) = load_data_artifacts(cfg)?;
    let r = mats.num_features();
    let mut model = init_model_with_hidden(cfg.merge, r, r, &cfg.hidden_dims, cfg.init_seed());
    let trace = train(&mut model, &mats, &split, &cfg.train)?;
    eprintln!(
        "train: {} epochs, loss {:.6} -> {:.6}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN)
    );

    let meta = cfg.meta();
    save_model(
        &cfg.out_dir.join(MODEL),
        &model,
        serde_json::to_value(&meta).expect("meta serializes"),
    )?;
    write_json(
        &cfg.out_dir.join(LOSS_TRACE),
        &Wrapped {
            meta,
            body: TraceArtifact { loss_trace: trace },
        },
    )?;
    Ok(())
}

fn load_model_artifacts(
    cfg: &RunConfig,
) -> Result<(
    RankerModel,
    Catalog,
    DatasetSplit,
    GroupAssignment,
    FeatureMatrices,
)> {
    require_artifact(&cfg.out_dir.join(MODEL), "train")?;
    let model = load_model(&cfg.out_dir.join(MODEL))?;
    let (catalog, split, groups, mats) = load_data_artifacts(cfg)?;
    Ok((model, catalog, split, groups, mats))
}

fn baseline_to_ranked(catalog: &Catalog, ranking: &BaselineRanking) -> Vec<RankedFeature> {
    ranking
        .ranked_features
        .iter()
        .zip(&ranking.scores)
        .map(|(&f, &score)| RankedFeature {
            feature_id: f,
            feature_name: catalog.features()[f].clone(),
            score,
            validity: None,
            proximity: None,
            es: None,
            iters: None,
        })
        .collect()
}

fn print_top_table(method: &str, beta: f64, ranking: &[RankedFeature], top: usize) {
    println!("top-{top} features (method = {method}, beta = {beta}):");
    println!("{:<5} {:<20} {:>12} {:>12} {:>12}", "rank", "feature", "score", "validity", "proximity");
    for (i, row) in ranking.iter().take(top).enumerate() {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!(
            "{:<5} {:<20} {:>12.6} {:>12} {:>12}",
            i + 1,
            row.feature_name,
            row.score,
            fmt(row.validity),
            fmt(row.proximity),
        );
    }
}

/// Stage 3: produce a feature ranking with each requested method.
pub fn cmd_explain(cfg: &RunConfig, methods: &[String], allow_mismatch: bool) -> Result<()> {
    check_config_consistency(cfg, allow_mismatch)?;
    let (model, catalog, split, groups, mats) = load_model_artifacts(cfg)?;
    let meta = cfg.meta();

    for method in methods {
        let (ranking, failures) = match method.as_str() {
            "random" => (
                baseline_to_ranked(
                    &catalog,
                    &random_ranking(mats.num_features(), cfg.random_baseline_seed()),
                ),
                vec![],
            ),
            "pop-user" => (
                baseline_to_ranked(&catalog, &popularity_ranking(&mats, MatrixSide::User)),
                vec![],
            ),
            "pop-item" => (
                baseline_to_ranked(&catalog, &popularity_ranking(&mats, MatrixSide::Item)),
                vec![],
            ),
            "efm-user" => (
                baseline_to_ranked(&catalog, &efm_average_ranking(&mats, MatrixSide::User)),
                vec![],
            ),
            "efm-item" => (
                baseline_to_ranked(&catalog, &efm_average_ranking(&mats, MatrixSide::Item)),
                vec![],
            ),
            "shapley" => (
                baseline_to_ranked(
                    &catalog,
                    &shapley_ranking(
                        &model,
                        &mats,
                        &groups,
                        &split,
                        cfg.cef.k,
                        cfg.shapley_samples,
                        cfg.shapley_seed(),
                        cfg.shapley_exact,
                    )?,
                ),
                vec![],
            ),
            "cef" => {
                let report = explain_all(&model, &mats, &groups, &split, &cfg.cef)?;
                let ranked = report
                    .explanations
                    .iter()
                    .map(|e| RankedFeature {
                        feature_id: e.feature,
                        feature_name: catalog.features()[e.feature].clone(),
                        score: e.es,
                        validity: Some(e.validity),
                        proximity: Some(e.proximity),
                        es: Some(e.es),
                        iters: Some(e.iters_used),
                    })
                    .collect();
                (ranked, report.failures)
            }
            other => {
                return Err(Error::data(format!(
                    "unknown explanation method {other:?} (expected one of random, pop-user, \
                     pop-item, efm-user, efm-item, shapley, cef)"
                )))
            }
        };

        if !failures.is_empty() {
            eprintln!(
                "explain: {} feature optimizations failed for {method}",
                failures.len()
            );
        }
        let artifact = ExplainArtifact {
            meta: meta.clone(),
            method: method.clone(),
            beta: cfg.cef.beta,
            ranking,
            failures,
        };
        let path = cfg.out_dir.join(explain_artifact_name(method));
        write_json(&path, &artifact)?;
        print_top_table(method, cfg.cef.beta, &artifact.ranking, 5);
        eprintln!("explain: wrote {}", path.display());
    }
    Ok(())
}

fn load_ranking(cfg: &RunConfig, method: &str) -> Result<Vec<usize>> {
    let path = cfg.out_dir.join(explain_artifact_name(method));
    require_artifact(&path, "explain")?;
    let artifact: ExplainArtifact = read_json(&path)?;
    Ok(artifact.ranking.iter().map(|r| r.feature_id).collect())
}

/// Stage 4: erasure evaluation at the configured erasure levels.
pub fn cmd_evaluate(cfg: &RunConfig, methods: &[String], allow_mismatch: bool) -> Result<()> {
    check_config_consistency(cfg, allow_mismatch)?;
    let (model, _, split, groups, mats) = load_model_artifacts(cfg)?;
    let meta = cfg.meta();

    let mut points: Vec<TradeoffPoint> = Vec::new();
    for method in methods {
        let ranking = load_ranking(cfg, method)?;
        for &e in &cfg.e_levels {
            points.push(erase_and_eval(
                &model, &mats, &ranking, e, &split, &groups, &cfg.k_list, method,
            )?);
        }
    }

    let csv = format!(
        "{}{}",
        csv_meta_comment(&meta),
        fairexp_core::erasure::tradeoff_csv(&points)
    );
    write_text(&cfg.out_dir.join(TRADEOFF_CSV), &csv)?;
    write_json(
        &cfg.out_dir.join(TRADEOFF_JSON),
        &json!({ "meta": meta, "points": points }),
    )?;
    eprintln!(
        "evaluate: {} points written to {}",
        points.len(),
        cfg.out_dir.join(TRADEOFF_CSV).display()
    );
    Ok(())
}

/// Stage 5: cumulative-erasure trade-off curves plus per-cutoff plot
/// data (x = long-tail rate, y = NDCG).
pub fn cmd_curve(cfg: &RunConfig, methods: &[String], allow_mismatch: bool) -> Result<()> {
    check_config_consistency(cfg, allow_mismatch)?;
    let (model, _, split, groups, mats) = load_model_artifacts(cfg)?;
    let meta = cfg.meta();

    let mut points: Vec<TradeoffPoint> = Vec::new();
    for method in methods {
        let ranking = load_ranking(cfg, method)?;
        points.extend(tradeoff_curve(
            &model,
            &mats,
            &ranking,
            cfg.curve_step,
            cfg.curve_max_e,
            &split,
            &groups,
            &cfg.k_list,
            method,
        )?);
    }

    let csv = format!(
        "{}{}",
        csv_meta_comment(&meta),
        fairexp_core::erasure::tradeoff_csv(&points)
    );
    write_text(&cfg.out_dir.join(CURVE_CSV), &csv)?;
    write_json(
        &cfg.out_dir.join(CURVE_JSON),
        &json!({ "meta": meta, "points": points }),
    )?;
    for &k in &cfg.k_list {
        let plot = format!("{}{}", csv_meta_comment(&meta), curve_plot_csv(&points, k)?);
        write_text(&cfg.out_dir.join(format!("curve_plot_k{k}.csv")), &plot)?;
    }
    eprintln!("curve: wrote {}", cfg.out_dir.join(CURVE_CSV).display());
    Ok(())
}
