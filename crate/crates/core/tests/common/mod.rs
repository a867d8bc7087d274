#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anaqa::benchgen::{self, GenConfig, Suite};
use anaqa::gateway::AgentRole;
use anaqa::orchestrator::{ProviderSpec, RunConfig};
use anaqa::reference::build_fixtures;

/// A generated suite on disk with reference fixtures next to it.
pub struct OracleSuite {
    pub dir: tempfile::TempDir,
    pub suite: Suite,
    pub planner: PathBuf,
    pub coder: PathBuf,
}

impl OracleSuite {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    /// Oracle reader, scripted planner and coder, reference normalizer,
    /// synthesizer and judge.
    pub fn config(&self) -> RunConfig {
        let mut providers = BTreeMap::new();
        providers.insert(AgentRole::Planner, ProviderSpec::Scripted { fixture: self.planner.clone() });
        providers.insert(AgentRole::Coder, ProviderSpec::Scripted { fixture: self.coder.clone() });
        providers.insert(AgentRole::Reader, ProviderSpec::Oracle);
        providers.insert(AgentRole::Normalizer, ProviderSpec::Reference);
        providers.insert(AgentRole::Synthesizer, ProviderSpec::Reference);
        providers.insert(AgentRole::Judge, ProviderSpec::Reference);
        let cfg = RunConfig {
            providers,
            ..RunConfig::default()
        };
        cfg.validate().expect("valid oracle config");
        cfg
    }
}

pub fn oracle_suite(cfg: &GenConfig) -> OracleSuite {
    let dir = tempfile::tempdir().unwrap();
    let suite = benchgen::generate_suite(cfg, benchgen::templates::default_templates()).unwrap();
    suite.save(dir.path()).unwrap();
    let fx = build_fixtures(&suite.instances, &suite.templates).unwrap();
    let planner = dir.path().join("planner.json");
    let coder = dir.path().join("coder.json");
    fx.planner.save(&planner).unwrap();
    fx.coder.save(&coder).unwrap();
    OracleSuite {
        dir,
        suite,
        planner,
        coder,
    }
}

pub fn small_suite() -> OracleSuite {
    oracle_suite(&GenConfig {
        companies: 6,
        per_template: 1,
        min_companies: 4,
        max_companies: 5,
        ..GenConfig::default()
    })
}

/// Every regular file under `dir`, relative path to contents.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
