use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use alnk_core::analysis::{assemble_matrix, double_center, svd_variance_curve, write_curve_csv};
use alnk_core::checkpoint::Container;
use alnk_core::discovery::{
    cost_curve, discover, rank_candidates, unobserved_pairs, DatasetRun, DiscoveryLedger, FileOracle, LedgerRecord,
    Outcome,
};
use alnk_core::evaluate::{degree_binned, evaluate, Predictor};
use alnk_core::graph::{ArtifactGraph, NodeIdx};
use alnk_core::heuristics::{mf_train, MfModel};
use alnk_core::ingest::{load_corpus, write_corpus, EmbeddingTable, IngestError};
use alnk_core::metrics::{mean_baselines, write_reports_csv, MeanKind, Report};
use alnk_core::ranker::{self, write_log_csv, PairScore, RankerError, RankerParams, Scorer};
use alnk_core::splits::{inductive_split, sample_train_negatives, transductive_split, SplitMode, SplitSpec};
use alnk_core::synthetic::generate;
use serde::Serialize;

use crate::config::{RunConfig, ScoreKind};
use crate::error::{io, CliError};

/// Candidate pairs, their scores, and the configured ranking score of each.
type Scored = (Vec<(NodeIdx, NodeIdx)>, Vec<PairScore>, Vec<f64>);

fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, bytes).map_err(io(path))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|_| CliError::MissingArtifact(path.to_path_buf()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serialisable");
    b.push(b'\n');
    b
}

fn ingest_error(e: IngestError) -> CliError {
    match e {
        IngestError::Io { path, .. } if !path.exists() => CliError::MissingArtifact(path),
        other => CliError::Input(other.to_string()),
    }
}

pub struct Run {
    pub cfg: RunConfig,
}

impl Run {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn graph_dir(&self) -> PathBuf {
        self.out("graph")
    }

    pub fn write_resolved_config(&self) -> Result<(), CliError> {
        write(&self.out("resolved_config.json"), &json_bytes(&self.cfg))
    }

    fn load_graph(&self) -> Result<(ArtifactGraph, EmbeddingTable), CliError> {
        let d = self.graph_dir();
        load_corpus(&d.join("nodes.jsonl"), &d.join("edges.jsonl"), &d.join("embeddings.bin")).map_err(ingest_error)
    }

    fn split_path(&self, mode: SplitMode) -> PathBuf {
        self.out(&format!("split_{mode}.json"))
    }

    fn load_split(&self, mode: SplitMode) -> Result<SplitSpec, CliError> {
        let p = self.split_path(mode);
        serde_json::from_slice(&read(&p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
    }

    fn load_ranker(&self, mode: SplitMode) -> Result<RankerParams, CliError> {
        let p = self.out(&format!("model_{mode}.ckpt"));
        let c = Container::from_bytes(&read(&p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        RankerParams::from_container(&c).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
    }

    fn load_mf(&self, mode: SplitMode) -> Result<MfModel, CliError> {
        let p = self.out(&format!("mf_{mode}.ckpt"));
        let c = Container::from_bytes(&read(&p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
        MfModel::from_container(&c).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
    }

    fn scorer(&self, g: &ArtifactGraph, emb: &EmbeddingTable, mode: SplitMode) -> Result<Scorer, CliError> {
        let split = self.load_split(mode)?;
        let params = self.load_ranker(mode)?;
        if params.config.encoder.input_dim != emb.dim() {
            return Err(CliError::Input(format!(
                "checkpoint expects {}-dimensional features, corpus has {}",
                params.config.encoder.input_dim,
                emb.dim()
            )));
        }
        Scorer::new(&params, &split.train_visible_graph(g), &emb.to_tensor()).map_err(compute)
    }

    pub fn ingest(&self) -> Result<(), CliError> {
        let d = &self.cfg.data;
        let (g, emb) = load_corpus(&d.nodes, &d.edges, &d.embeddings).map_err(ingest_error)?;
        write_corpus(&self.graph_dir(), &g, &emb).map_err(ingest_error)?;
        let summary = serde_json::json!({
            "nodes": g.node_count(),
            "edges": g.edge_count(),
            "models": g.models().len(),
            "datasets": g.datasets().len(),
            "eval_edges": g.eval_edges().count(),
            "embedding_dim": emb.dim(),
        });
        write(&self.out("graph/summary.json"), &json_bytes(&summary))?;
        self.load_graph().map(|_| ())
    }

    pub fn split(&self) -> Result<(), CliError> {
        let (g, _) = self.load_graph()?;
        let s = &self.cfg.split;
        for &mode in &s.settings {
            let spec = match mode {
                SplitMode::Transductive => transductive_split(&g, s.test, s.dev, self.cfg.seed),
                SplitMode::Inductive => inductive_split(&g, s.held_out_fraction, self.cfg.seed),
            }
            .map_err(compute)?;
            write(&self.split_path(mode), &json_bytes(&spec))?;
            self.load_split(mode)?;
        }
        Ok(())
    }

    pub fn train(&self) -> Result<(), CliError> {
        let (g, emb) = self.load_graph()?;
        if self.cfg.ranker.encoder.input_dim != emb.dim() {
            return Err(CliError::Config {
                pointer: "/ranker/encoder/input_dim".into(),
                msg: format!("is {}, embeddings have dimension {}", self.cfg.ranker.encoder.input_dim, emb.dim()),
            });
        }
        for &mode in &self.cfg.split.settings {
            let split = self.load_split(mode)?;
            log::info!("training ranker ({mode}) on {} train edges", split.train.len());
            let out = ranker::train(&g, &emb, &split, &self.cfg.ranker).map_err(|e| match e {
                RankerError::Config(m) => CliError::Config { pointer: "/ranker".into(), msg: m },
                other => compute(other),
            })?;
            log::info!("kept epoch {} (selection metric {:?})", out.best_epoch, out.best_metric);
            write(&self.out(&format!("model_{mode}.ckpt")), &out.params.to_container().to_bytes())?;
            let log_csv = csv_bytes(|b| write_log_csv(&out.log, b));
            write(&self.out(&format!("train_log_{mode}.csv")), &log_csv)?;
            self.load_ranker(mode)?;

            let neg = sample_train_negatives(&g, &split, self.cfg.ranker.train.neg_ratio, self.cfg.seed)
                .map_err(compute)?;
            let (mf, loss) = mf_train(&g, &split, &neg, &self.cfg.mf, self.cfg.seed).map_err(compute)?;
            log::info!("mf ({mode}) final loss {loss:.6}");
            write(&self.out(&format!("mf_{mode}.ckpt")), &mf.to_container().to_bytes())?;
            self.load_mf(mode)?;
        }
        Ok(())
    }

    pub fn evaluate(&self) -> Result<(), CliError> {
        let (g, emb) = self.load_graph()?;
        let mut reports: Vec<Report> = Vec::new();
        for &mode in &self.cfg.split.settings {
            let split = self.load_split(mode)?;
            let visible = split.train_visible_graph(&g);
            let scorer = self.scorer(&g, &emb, mode)?;
            let mf = self.load_mf(mode)?;
            let means = mean_baselines(&g, &split).map_err(compute)?;
            let mut predictors =
                vec![Predictor::Ranker(&scorer), Predictor::AdamicAdar(&visible), Predictor::Katz(&visible), Predictor::Mf(&mf)];
            predictors.extend(MeanKind::ALL.iter().map(|&k| Predictor::Mean(&means, k)));
            for p in &predictors {
                reports.extend(evaluate(&g, &split, p, &self.cfg.eval).map_err(compute)?);
            }
        }
        write(&self.out("report.json"), &json_bytes(&reports))?;
        write(&self.out("report.csv"), &csv_bytes(|b| write_reports_csv(&reports, b)))?;
        let back: Vec<Report> = serde_json::from_slice(&read(&self.out("report.json"))?).map_err(compute)?;
        if back.len() != reports.len() {
            return Err(CliError::Compute("report did not round-trip".into()));
        }
        Ok(())
    }

    /// Unobserved pairs with their scores under the configured score kind.
    fn scored_unobserved(
        &self,
        g: &ArtifactGraph,
        emb: &EmbeddingTable,
    ) -> Result<Scored, CliError> {
        let scorer = self.scorer(g, emb, self.cfg.discovery.setting)?;
        let pairs = unobserved_pairs(g);
        let ps = scorer.score_pairs(&pairs).map_err(compute)?;
        let scores = ps
            .iter()
            .map(|p| match self.cfg.discovery.score {
                ScoreKind::RankScore => p.rank_score(),
                ScoreKind::AttrOnly => p.attr_score(),
                ScoreKind::LinkOnly => p.link_prob(),
            })
            .collect();
        Ok((pairs, ps, scores))
    }

    pub fn rank(&self) -> Result<(), CliError> {
        let (g, emb) = self.load_graph()?;
        let (pairs, ps, scores) = self.scored_unobserved(&g, &emb)?;
        let mut by_d: BTreeMap<NodeIdx, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_d.entry(p.1).or_default().push(i);
        }
        let mut csv = String::from("dataset,rank,model,score,rank_score,link_prob,attr_score\n");
        for (d, idx) in by_d {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            for (r, &j) in alnk_core::metrics::ranked_order(&s).iter().enumerate() {
                let i = idx[j];
                let p = &ps[i];
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    g.node(d).id,
                    r + 1,
                    g.node(pairs[i].0).id,
                    scores[i],
                    p.rank_score(),
                    p.link_prob(),
                    p.attr_score()
                ));
            }
        }
        write(&self.out("rank.csv"), csv.as_bytes())
    }

    fn oracle(&self) -> Result<FileOracle, CliError> {
        let p = self.cfg.discovery.oracle.clone().ok_or_else(|| CliError::Config {
            pointer: "/discovery/oracle".into(),
            msg: "an oracle file is required".into(),
        })?;
        if !p.exists() {
            return Err(CliError::MissingArtifact(p));
        }
        FileOracle::from_path(&p).map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn discover(&self) -> Result<(), CliError> {
        let (g, emb) = self.load_graph()?;
        let oracle = self.oracle()?;
        let (pairs, _, scores) = self.scored_unobserved(&g, &emb)?;
        let cands = rank_candidates(&pairs, &scores);
        let ledger = discover(&g, &cands, &oracle, self.cfg.discovery.budget).map_err(compute)?;
        write(&self.out("ledger.csv"), &csv_bytes(|b| ledger.write_csv(&g, b)))?;

        // Cost curve: verify each dataset's whole pool in ranked order.
        let mut runs = Vec::new();
        let mut k_max = 0;
        for &d in g.datasets() {
            let pool: Vec<_> = cands.iter().copied().filter(|c| c.dataset == d).collect();
            if pool.is_empty() {
                continue;
            }
            let l = discover(&g, &pool, &oracle, pool.len()).map_err(compute)?;
            let best = l.records.iter().filter_map(|r| r.outcome.score()).fold(0.0, f64::max);
            if best > 0.0 {
                k_max = k_max.max(pool.len());
                runs.push(DatasetRun::from_ledger(&l, d, best));
            }
        }
        let summary = if runs.is_empty() {
            log::warn!("no dataset pool has a verified score; cost curve is empty");
            serde_json::json!({"budget_used": ledger.budget_used, "sota_events": ledger.sota_events(), "datasets": 0})
        } else {
            let curve = cost_curve(&runs, k_max).map_err(compute)?;
            write(&self.out("cost_curve.csv"), &csv_bytes(|b| curve.write_csv(b)))?;
            serde_json::json!({
                "budget_used": ledger.budget_used,
                "sota_events": ledger.sota_events(),
                "datasets": runs.len(),
                "k_at_half": curve.first_k_reaching(0.5),
                "k_at_oracle": curve.first_k_reaching(1.0),
            })
        };
        write(&self.out("discovery.json"), &json_bytes(&summary))
    }

    /// Verified ledger scores read back from `ledger.csv`, if present.
    fn read_ledger(&self, g: &ArtifactGraph) -> Result<Option<DiscoveryLedger>, CliError> {
        let p = self.out("ledger.csv");
        if !p.exists() {
            return Ok(None);
        }
        let text = String::from_utf8(read(&p)?).map_err(|e| CliError::Input(e.to_string()))?;
        let mut ledger = DiscoveryLedger::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || CliError::Input(format!("{}:{}: malformed ledger row", p.display(), i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let (Some(m), Some(d)) = (g.index_of(f[1]), g.index_of(f[2])) else { return Err(bad()) };
            let outcome = match f[4].parse::<f64>() {
                Ok(s) => Outcome::Score(s),
                Err(_) => Outcome::Failure(f[4].trim_start_matches("failure:").to_string()),
            };
            ledger.records.push(LedgerRecord {
                rank: f[0].parse().map_err(|_| bad())?,
                model: m,
                dataset: d,
                predicted: f[3].parse().map_err(|_| bad())?,
                outcome,
                current_sota_before: None,
                is_new_sota: f[5] == "true",
            });
        }
        ledger.budget_used = ledger.records.len();
        Ok(Some(ledger))
    }

    pub fn analyze(&self) -> Result<(), CliError> {
        let (g, emb) = self.load_graph()?;
        let ledgers: Vec<DiscoveryLedger> = self.read_ledger(&g)?.into_iter().collect();
        let full = assemble_matrix(&g, &ledgers, g.datasets(), g.models(), self.cfg.analysis.metric.as_deref());
        // Rows and columns without any cell carry no information.
        let nm = g.models().len();
        let rows: Vec<NodeIdx> = g
            .datasets()
            .iter()
            .enumerate()
            .filter(|(r, _)| (0..nm).any(|c| full.get(*r, c).is_some()))
            .map(|(_, &d)| d)
            .collect();
        let cols: Vec<NodeIdx> = g
            .models()
            .iter()
            .enumerate()
            .filter(|(c, _)| (0..g.datasets().len()).any(|r| full.get(r, *c).is_some()))
            .map(|(_, &m)| m)
            .collect();
        let m = assemble_matrix(&g, &ledgers, &rows, &cols, self.cfg.analysis.metric.as_deref());
        write(&self.out("matrix.csv"), &csv_bytes(|b| m.write_csv(b)))?;
        let centered = double_center(&m, self.cfg.analysis.missing_policy).map_err(compute)?;
        write(&self.out("centered_matrix.csv"), &csv_bytes(|b| centered.write_csv(b)))?;
        let curve = svd_variance_curve(&centered).map_err(compute)?;
        write(&self.out("variance_curve.csv"), &csv_bytes(|b| write_curve_csv(&curve, b)))?;

        let mut csv = String::from("setting,model,lo,hi,count,mae\n");
        for &mode in &self.cfg.split.settings {
            let split = self.load_split(mode)?;
            let scorer = self.scorer(&g, &emb, mode)?;
            let means = mean_baselines(&g, &split).map_err(compute)?;
            for p in [Predictor::Ranker(&scorer), Predictor::Mean(&means, MeanKind::Dataset)] {
                let bins = degree_binned(&g, &split, &p, &self.cfg.eval.degree_bins).map_err(compute)?.unwrap_or_default();
                for b in bins {
                    let mae = b.mae.map(|v| v.to_string()).unwrap_or_default();
                    csv.push_str(&format!("{mode},{},{},{},{},{mae}\n", p.name(), b.lo, b.hi, b.count));
                }
            }
        }
        write(&self.out("degree_mae.csv"), csv.as_bytes())
    }

    /// Writes a planted corpus and its oracle table into the output directory.
    pub fn synth(&self) -> Result<(), CliError> {
        let inst = generate(&self.cfg.synth);
        let dir = &self.cfg.out_dir;
        write_corpus(dir, &inst.graph, &inst.embeddings).map_err(ingest_error)?;
        write(&dir.join("oracle.jsonl"), inst.oracle_jsonl().as_bytes())
    }
}
