use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fjsp_core::fjs::{parse_fjs, write_fjs};
use fjsp_core::instance::InstanceDocument;
use fjsp_core::{FjspInstance, Generator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

pub fn instance_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads `.json` as a native document and anything else as `.fjs` text.
pub fn load_instance(path: &Path) -> Result<FjspInstance> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let inst = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<InstanceDocument>(&text)
            .with_context(|| format!("parsing {}", path.display()))?
            .instance
    } else {
        parse_fjs(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    if let Err(violations) = inst.validate() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        bail!("{}: invalid instance: {}", path.display(), list.join("; "));
    }
    Ok(inst)
}

/// Instance files of a dataset directory in name order. `.fjs` files are
/// preferred; `.json` documents are used only when no `.fjs` file exists.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut fjs = Vec::new();
    let mut json = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("fjs") => fjs.push(path),
            Some("json") if path.file_name().is_some_and(|n| n != MANIFEST) => json.push(path),
            _ => {}
        }
    }
    let mut out = if fjs.is_empty() { json } else { fjs };
    out.sort();
    Ok(out)
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Random stream of the generator seed that produced this instance.
    pub stream: u64,
    pub fjs_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: Generator,
    pub version: String,
    pub jobs: usize,
    pub machines: usize,
    pub seed: u64,
    pub instances: Vec<ManifestEntry>,
}

/// Instance `index` of a generated dataset; independent of `count`.
pub fn generated_instance(generator: Generator, jobs: usize, machines: usize, seed: u64, index: u64) -> FjspInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generator.generate(jobs, machines, &mut rng)
}

pub fn generate_dataset(
    generator: Generator,
    jobs: usize,
    machines: usize,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    if jobs == 0 || machines == 0 || (generator == Generator::Sd1 && machines < 2) {
        bail!("unsupported size {jobs}x{machines} for {generator}");
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let inst = generated_instance(generator, jobs, machines, seed, i as u64);
        let name = format!("{generator}_{jobs}x{machines}_{i:04}");
        let text = write_fjs(&inst);
        std::fs::write(out.join(format!("{name}.fjs")), &text)?;
        let doc = InstanceDocument {
            name: name.clone(),
            generator: Some(generator.version_tag().to_string()),
            seed: Some(seed),
            instance: inst,
        };
        std::fs::write(
            out.join(format!("{name}.json")),
            serde_json::to_string_pretty(&doc)? + "\n",
        )?;
        instances.push(ManifestEntry {
            name,
            stream: i as u64,
            fjs_sha256: sha256_bytes(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        generator,
        version: generator.version_tag().to_string(),
        jobs,
        machines,
        seed,
        instances,
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// User-supplied reference values: CSV with columns `instance,best_known`.
pub fn load_best_known(path: &Path) -> Result<std::collections::BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        instance: String,
        best_known: f64,
    }
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::collections::BTreeMap::new();
    for row in reader.deserialize() {
        let row: Row = row.with_context(|| format!("parsing {}", path.display()))?;
        if row.best_known.is_nan() || row.best_known <= 0.0 {
            bail!("{}: best_known for {} must be positive", path.display(), row.instance);
        }
        out.insert(row.instance, row.best_known);
    }
    Ok(out)
}
