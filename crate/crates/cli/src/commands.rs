//! One function per subcommand. Each returns what it printed or wrote so the
//! integration tests can drive them without a subprocess.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use cbhir_core::checkpoint::{self, CheckpointHeader};
use cbhir_core::data::{self, list_images, load_dataset, load_image, DatasetManifest, UNCERTAIN_DIR};
use cbhir_core::eval::{self, format_table, uncertain_query_report, write_results_jsonl};
use cbhir_core::service::{QueryResponse, QueryService};
use cbhir_core::store::index_build;
use cbhir_core::train::{train_with_observer, TrainEvent};
use cbhir_core::{
    FeatureStore, Label, MetricsReport, Network, NetworkConfig, PatchRecord, Split, TrainConfig, UncertainReport,
};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

/// `<path><suffix>`, e.g. `model.ckpt` + `.loss.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub struct SynthArgs {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<DatasetManifest> {
    let records = data::synth_generate::<f64>(args.n_per_class, (args.size, args.size), args.seed)?;
    let classes: Vec<String> = data::SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    data::write_dataset(&records, &classes, &args.out)?;
    let manifest = DatasetManifest::from_records(&args.out, &classes, &records, args.seed, DEFAULT_TRAIN_FRACTION);
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(manifest)
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub preset: String,
    pub epochs: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Square input size overriding the preset's.
    pub input_size: Option<usize>,
    pub train_fraction: f64,
    pub batch_size: Option<usize>,
    pub margin: Option<f64>,
    /// Write `<out>.epoch<N>` every N epochs.
    pub checkpoint_every: Option<usize>,
    pub quiet: bool,
}

pub struct TrainOutput {
    pub network: Network,
    pub report: cbhir_core::TrainReport,
    pub loss_csv: PathBuf,
    pub manifest: PathBuf,
}

pub fn train(args: &TrainArgs) -> Result<TrainOutput> {
    let mut net_cfg = NetworkConfig::preset(&args.preset)?;
    if let Some(s) = args.input_size {
        net_cfg = net_cfg.with_input_size(s, s);
    }
    net_cfg.validate()?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs,
        seed: args.seed,
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        margin: args.margin.unwrap_or(defaults.margin),
        ..defaults
    };
    let dataset = load_dataset::<f64>(&args.data, net_cfg.input_shape)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let records = data::split(dataset.records, args.train_fraction, args.seed)?;

    let metadata = BTreeMap::from([
        ("classes".to_string(), json!(dataset.classes)),
        ("data_root".to_string(), json!(args.data)),
        ("split_seed".to_string(), json!(args.seed)),
        ("train_fraction".to_string(), json!(args.train_fraction)),
        ("train_config".to_string(), serde_json::to_value(&cfg)?),
    ]);
    let (network, report) = train_with_observer(&records, &net_cfg, &cfg, |ev| {
        if let TrainEvent::EpochEnd {
            epoch,
            mean_loss,
            lr,
            network,
        } = ev
        {
            if !args.quiet {
                eprintln!("epoch {epoch:>4}  loss {mean_loss:.6}  lr {lr:.6}");
            }
            if let Some(every) = args.checkpoint_every.filter(|&n| n > 0) {
                if epoch % every == 0 {
                    let mut meta = metadata.clone();
                    meta.insert("epoch".into(), json!(epoch));
                    let mut m = network.clone();
                    m.set_mode(cbhir_core::Mode::Inference);
                    checkpoint::save(&m, &meta, &sibling(&args.out, &format!(".epoch{epoch}")))?;
                }
            }
        }
        Ok(())
    })?;

    checkpoint::save(&network, &metadata, &args.out)?;
    let loss_csv = sibling(&args.out, ".loss.csv");
    fs::write(&loss_csv, report.to_csv()).with_context(|| format!("writing {}", loss_csv.display()))?;
    let manifest = sibling(&args.out, ".manifest.json");
    DatasetManifest::from_records(&args.data, &dataset.classes, &records, args.seed, args.train_fraction)
        .write(&manifest)?;
    Ok(TrainOutput {
        network,
        report,
        loss_csv,
        manifest,
    })
}

/// Network plus the split that was used to train it.
pub struct Loaded {
    pub network: Network,
    pub header: CheckpointHeader,
    pub split_seed: u64,
    pub train_fraction: f64,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (network, header) = checkpoint::load::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    let split_seed = header.metadata.get("split_seed").and_then(Value::as_u64).unwrap_or(header.seed);
    let train_fraction = header
        .metadata
        .get("train_fraction")
        .and_then(Value::as_f64)
        .unwrap_or(DEFAULT_TRAIN_FRACTION);
    Ok(Loaded {
        network,
        header,
        split_seed,
        train_fraction,
    })
}

/// Reloads `data` and reproduces the training split.
fn split_dataset(loaded: &Loaded, data: &Path) -> Result<Vec<PatchRecord>> {
    let dataset = load_dataset::<f64>(data, loaded.network.input_shape())
        .with_context(|| format!("loading {}", data.display()))?;
    Ok(data::split(dataset.records, loaded.train_fraction, loaded.split_seed)?)
}

fn only(records: &[PatchRecord], split: Split) -> Vec<PatchRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Embeds the training split of `data` into a store file.
pub fn index(ckpt: &Path, data: &Path, out: &Path) -> Result<FeatureStore> {
    let loaded = load_checkpoint(ckpt)?;
    let records = split_dataset(&loaded, data)?;
    let mut store = index_build(&loaded.network, &only(&records, Split::Train))?;
    let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    store.set_checkpoint(name);
    store.save(out)?;
    Ok(store)
}

pub fn open_service(ckpt: &Path, store: &Path) -> Result<QueryService> {
    let loaded = load_checkpoint(ckpt)?;
    let store = FeatureStore::load(store).with_context(|| format!("loading {}", store.display()))?;
    let hash = checkpoint::file_hash(ckpt)?;
    Ok(QueryService::new(loaded.network, store, hash)?)
}

pub fn query(ckpt: &Path, store: &Path, image: &Path, k: usize) -> Result<QueryResponse> {
    let service = open_service(ckpt, store)?;
    let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
    service.query_bytes(&bytes, k, false).map_err(|e| anyhow::anyhow!(e))
}

pub struct EvalOutput {
    pub reports: Vec<MetricsReport>,
    pub table: String,
    pub written: Vec<PathBuf>,
}

/// Scores the test split of `data` against `store`. Writes the JSON report
/// to `out` and, next to it, the text table, one confusion-matrix CSV per K
/// and the raw retrieval lists.
pub fn eval(ckpt: &Path, store_path: &Path, data: &Path, k_list: &[usize], out: &Path) -> Result<EvalOutput> {
    if k_list.is_empty() {
        bail!("--k-list is empty");
    }
    let loaded = load_checkpoint(ckpt)?;
    let store = FeatureStore::load(store_path)?;
    let queries = only(&split_dataset(&loaded, data)?, Split::Test);
    if queries.is_empty() {
        bail!("the test split of {} is empty", data.display());
    }
    let (scored, reports) = eval::evaluate(&loaded.network, &store, &queries, k_list)?;
    let table = format_table(&reports);

    let mut written = vec![out.to_path_buf()];
    let doc = json!({
        "checkpoint": ckpt,
        "store": store_path,
        "queries": queries.len(),
        "reports": reports,
    });
    fs::write(out, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", out.display()))?;
    let txt = out.with_extension("txt");
    fs::write(&txt, &table)?;
    written.push(txt);
    for r in &reports {
        let p = out.with_extension(format!("cm_k{}.csv", r.k));
        fs::write(&p, r.confusion_csv())?;
        written.push(p);
    }
    let results = out.with_extension("results.jsonl");
    write_results_jsonl(&scored, &results)?;
    written.push(results);
    Ok(EvalOutput { reports, table, written })
}

/// Queries every image under `uncertain_dir` against the binary store.
pub fn stump(ckpt: &Path, store: &Path, uncertain_dir: &Path, k: usize) -> Result<UncertainReport> {
    let loaded = load_checkpoint(ckpt)?;
    let store = FeatureStore::load(store)?;
    let shape = loaded.network.input_shape();
    let patches = list_images(uncertain_dir)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            Ok(PatchRecord {
                patch_id: format!("{UNCERTAIN_DIR}/{stem}"),
                pixels: load_image(&p, shape)?,
                label: Label::Uncertain,
                split: Split::Holdout,
                source_path: p.to_string_lossy().into_owned(),
            })
        })
        .collect::<cbhir_core::Result<Vec<_>>>()?;
    if patches.is_empty() {
        bail!("no images in {}", uncertain_dir.display());
    }
    Ok(uncertain_query_report(&store, &loaded.network, &patches, k)?)
}

pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            let k: usize = t.trim().parse().with_context(|| format!("bad K value {t:?}"))?;
            if k == 0 {
                bail!("K values must be at least 1");
            }
            Ok(k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_list_parsing() {
        assert_eq!(parse_k_list("1,3, 5").unwrap(), vec![1, 3, 5]);
        assert!(parse_k_list("1,0").is_err());
        assert!(parse_k_list("a").is_err());
    }

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("out/m.ckpt"), ".loss.csv"), PathBuf::from("out/m.ckpt.loss.csv"));
    }
}
