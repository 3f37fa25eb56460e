use clap::{Parser, Subcommand, ValueEnum};
use expgraph::aog::{self, AogModel, LocalizationRow, PartAnnotation};
use expgraph::fmap;
use expgraph::inference::{self, read_inference, write_inference};
use expgraph::learn::{self, LayersFile, MStepMode};
use expgraph::metrics::{self, LandmarkSet};
use expgraph::synth::{self, SynthSpec};
use expgraph::{Dataset, Error, ExplanatoryGraph};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "expgraph", version, about = "Learn and use explanatory graphs of CNN feature maps")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MStep {
    ClosedForm,
    Gradient,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset with a planted graph.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Share of activation peaks that are background noise.
        #[arg(long)]
        noise_fraction: Option<f64>,
        #[arg(long)]
        jitter: Option<f64>,
        /// Annotated images written to annotations.json for aog-build.
        #[arg(long, default_value_t = 3)]
        templates: usize,
        /// Landmark used for the annotations.
        #[arg(long, default_value = "head")]
        part: String,
    },
    /// Learn a graph top-down with EM.
    Learn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        layers: PathBuf,
        /// Output directory for graph.json and learn_log.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        m_step: Option<MStep>,
        #[arg(long = "iterations")]
        t: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Infer pattern positions for every image of a manifest.
    Infer {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving <image_id>.inference.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Location instability per node, and ranked top inferences.
    Instability {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        inference: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the top-energy inferences of each node.
        #[arg(long)]
        patches: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        energy: f64,
    },
    /// Heat map of one layer's patterns on one image.
    Heatmap {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        inference: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 56)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a part AOG from annotated images.
    AogBuild {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        inference: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Patterns per template (default 0.1 of all patterns).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize the AOG's part on every image of a manifest.
    AogLocalize {
        #[arg(long)]
        aog: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        inference: PathBuf,
        /// Ground truth for the norm_dist column.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a graph.json or .fmap file.
    Validate { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(cli.cmd)),
            Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
        },
        None => run(cli.cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "context": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

fn image_ids(manifest: &Path) -> Result<Vec<String>, Error> {
    Ok(fmap::read_manifest(manifest)?.into_iter().map(|e| e.image_id).collect())
}

fn inference_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.inference.json"))
}

type Inferences = Vec<Vec<Vec<inference::NodeAssignment>>>;

fn load_inferences(dir: &Path, ids: &[String], n_layers: usize) -> Result<Inferences, Error> {
    ids.iter()
        .map(|id| read_inference(inference_path(dir, id), n_layers))
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_annotations(path: &Path) -> Result<Vec<PartAnnotation>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenSynthetic {
            out,
            spec,
            images,
            seed,
            noise_fraction,
            jitter,
            templates,
            part,
        } => {
            let mut s = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::Parse {
                        path,
                        message: e.to_string(),
                    })?
                }
                None => SynthSpec::default(),
            };
            if let Some(n) = images {
                s.n_images = n;
            }
            if let Some(seed) = seed {
                s.rng_seed = seed;
            }
            if let Some(f) = noise_fraction {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::InvalidConfig("noise fraction must be in [0, 1)".into()));
                }
                let n = s.layers.iter().map(|l| l.patterns_per_filter).max().unwrap_or(1);
                s.noise_peaks = synth::noise_peaks_for_fraction(f, n);
            }
            if let Some(j) = jitter {
                s.jitter = j;
            }
            let planted = synth::gen_planted_graph(&s)?;
            let data = synth::sample_images(&planted, &s)?;
            create_dir(&out)?;
            let config = learn::LearnConfig {
                m: s.m,
                ..learn::LearnConfig::default()
            };
            synth::write_synthetic(&out, &s, &planted, &data, &config)?;
            let annotations: Vec<PartAnnotation> = data
                .truth
                .iter()
                .take(templates)
                .enumerate()
                .filter_map(|(k, t)| {
                    t.landmarks.get(&part).map(|&center| PartAnnotation {
                        image_id: t.image_id.clone(),
                        part: part.clone(),
                        center,
                        template: k,
                    })
                })
                .collect();
            write_file(
                &out.join("annotations.json"),
                &(serde_json::to_string_pretty(&annotations).expect("annotations serialize") + "\n"),
            )?;
            log::info!("wrote {} images to {}", s.n_images, out.display());
            Ok(())
        }
        Cmd::Learn {
            manifest,
            layers,
            out,
            seed,
            m_step,
            t,
            tau,
        } => {
            let file = LayersFile::read(&layers)?;
            let dataset = Dataset::load(&manifest)?;
            let first = dataset.images.first().ok_or(Error::EmptyDataset)?;
            let specs = file.layer_specs(|id| first.layer(id).map(|fm| fm.meta.depth))?;
            let mut config = file.learn_config(seed);
            if let Some(m) = m_step {
                config.m_step_mode = match m {
                    MStep::ClosedForm => MStepMode::ClosedForm,
                    MStep::Gradient => MStepMode::Gradient,
                };
            }
            if let Some(t) = t {
                config.t = t;
            }
            if let Some(tau) = tau {
                config.tau = tau;
            }
            let learned = learn::learn_graph(&dataset, &specs, &config)?;
            create_dir(&out)?;
            learned.graph.write(out.join("graph.json"))?;
            learn::write_learn_log(out.join("learn_log.csv"), &learned.log)?;
            Ok(())
        }
        Cmd::Infer { graph, manifest, out } => {
            let graph = ExplanatoryGraph::read(&graph)?;
            let dataset = Dataset::load(&manifest)?;
            let all = inference::infer_dataset(&graph, &dataset)?;
            create_dir(&out)?;
            for (set, layers) in dataset.images.iter().zip(&all) {
                write_inference(inference_path(&out, &set.image_id), layers)?;
            }
            Ok(())
        }
        Cmd::Instability {
            graph,
            manifest,
            inference,
            landmarks,
            out,
            patches,
            energy,
        } => {
            let graph = ExplanatoryGraph::read(&graph)?;
            let ids = image_ids(&manifest)?;
            let inf = load_inferences(&inference, &ids, graph.layers.len())?;
            let landmarks = LandmarkSet::read(&landmarks)?;
            let rows = metrics::instability_table(&graph, &ids, &inf, &landmarks)?;
            metrics::write_instability(&out, &rows)?;
            if let Some(path) = patches {
                let p = metrics::collect_patches(&graph, &ids, &inf, energy)?;
                metrics::write_patches(path, &p)?;
            }
            Ok(())
        }
        Cmd::Heatmap {
            graph,
            inference,
            image,
            layer,
            grid,
            out,
        } => {
            let graph = ExplanatoryGraph::read(&graph)?;
            let li = graph
                .layers
                .iter()
                .position(|l| l.spec.layer_id == layer)
                .ok_or_else(|| Error::LayerMissingInImage {
                    image_id: "(graph)".into(),
                    layer_id: layer.clone(),
                })?;
            let inf = read_inference(inference_path(&inference, &image), graph.layers.len())?;
            let values = metrics::render_heatmap(&graph.layers[li], &inf[li], grid)?;
            create_dir(&out)?;
            let stem = format!("{image}_{layer}");
            write_file(&out.join(format!("{stem}.pgm")), &metrics::heatmap_pgm(&values, grid))?;
            write_file(&out.join(format!("{stem}.csv")), &metrics::heatmap_csv(&values, grid))?;
            Ok(())
        }
        Cmd::AogBuild {
            graph,
            inference,
            annotations,
            k,
            out,
        } => {
            let graph = ExplanatoryGraph::read(&graph)?;
            let anns = read_annotations(&annotations)?;
            let mut inf = BTreeMap::new();
            for a in &anns {
                if !inf.contains_key(&a.image_id) {
                    let v = read_inference(inference_path(&inference, &a.image_id), graph.layers.len())?;
                    inf.insert(a.image_id.clone(), v);
                }
            }
            let k = k.unwrap_or_else(|| aog::default_k(&graph));
            let model = aog::build_aog(&graph, &inf, &anns, k)?;
            model.write(&out)?;
            Ok(())
        }
        Cmd::AogLocalize {
            aog: aog_path,
            graph,
            manifest,
            inference,
            landmarks,
            out,
        } => {
            let graph = ExplanatoryGraph::read(&graph)?;
            let model = AogModel::read(&aog_path)?;
            model.validate(&graph)?;
            let ids = image_ids(&manifest)?;
            let truth = landmarks.map(LandmarkSet::read).transpose()?;
            let mut rows = Vec::with_capacity(ids.len());
            for id in &ids {
                let inf = read_inference(inference_path(&inference, id), graph.layers.len())?;
                let result = match aog::localize_part(&model, &inf) {
                    Ok(r) => r,
                    Err(Error::NoDetectedPatterns) => {
                        log::warn!("image {id}: no template pattern detected");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let norm_dist = truth
                    .as_ref()
                    .and_then(|t| t.get(id))
                    .and_then(|parts| parts.get(&model.part))
                    .map(|&gt| aog::normalized_distance(result.p, gt));
                rows.push(LocalizationRow {
                    image_id: id.clone(),
                    part: model.part.clone(),
                    result,
                    norm_dist,
                });
            }
            write_file(&out, &aog::localization_csv(&rows))?;
            Ok(())
        }
        Cmd::Validate { path } => {
            let is_fmap = path.extension().is_some_and(|e| e == "fmap");
            if is_fmap {
                let fm = fmap::load_fmap(&path)?;
                println!(
                    "ok: fmap {} layer {} ({}x{}x{})",
                    fm.image_id, fm.meta.layer_id, fm.meta.depth, fm.meta.height, fm.meta.width
                );
            } else {
                let g = ExplanatoryGraph::read(&path)?;
                println!("ok: graph with {} layers, {} patterns", g.layers.len(), g.total_patterns());
            }
            Ok(())
        }
    }
}
