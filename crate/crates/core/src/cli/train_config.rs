//! The `train` run file: `TrainConfig` keys at the top level plus the
//! network, data and view settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::archspec::ArchSpec;
use crate::cotrain::TrainConfig;
use crate::datagen::{self, read_csv, read_raw, Dataset, Split, Transform, ViewPipeline};
use crate::divider::{divide_arch, WdKind, WdPolicy};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Spirals {
        n_total: usize,
        n_train: usize,
        classes: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        n_total: usize,
        n_train: usize,
        classes: usize,
        dim: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// CSV files with header `f0..fk,label`.
    Csv { train: PathBuf, test: PathBuf },
    /// Raw tensors, addressed by their JSON sidecars.
    Raw { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Spirals {
            n_total: 5000,
            n_train: 4000,
            classes: 3,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl DataSource {
    pub fn input_files(&self) -> Vec<PathBuf> {
        match self {
            DataSource::Csv { train, test } | DataSource::Raw { train, test } => vec![train.clone(), test.clone()],
            _ => Vec::new(),
        }
    }

    fn rebase(&mut self, dir: &Path) {
        if let DataSource::Csv { train, test } | DataSource::Raw { train, test } = self {
            for p in [train, test] {
                if p.is_relative() {
                    let joined = dir.join(&*p);
                    *p = std::path::absolute(&joined).unwrap_or(joined);
                }
            }
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            &DataSource::Spirals {
                n_total,
                n_train,
                classes,
                noise,
                seed,
            } => datagen::spirals(n_total, classes, noise, seed)?.split_at(n_train),
            &DataSource::Blobs {
                n_total,
                n_train,
                classes,
                dim,
                noise,
                seed,
            } => datagen::make_blobs(n_total, classes, dim, noise, seed)?.split_at(n_train),
            DataSource::Csv { train, test } => {
                let tr = read_csv(train, None, Split::Train)?;
                let te = read_csv(test, Some(tr.num_classes), Split::Test)?;
                Ok((tr, te))
            }
            DataSource::Raw { train, test } => Ok((read_raw(train)?, read_raw(test)?)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRun {
    pub train: TrainConfig,
    /// Whether the file set `base_seed` itself.
    pub seed_given: bool,
    /// The undivided network; defaults to a two-hidden-layer MLP of width 64.
    pub arch: Option<ArchSpec>,
    /// Divide `arch` by `s`; otherwise every member is a copy of `arch`.
    pub divide: bool,
    pub wd_policy: WdKind,
    pub data: DataSource,
    /// One transform list for all members, or one per member.
    pub views: Vec<Vec<Transform>>,
    /// Seed of the view streams; defaults to `base_seed`.
    pub view_seed: Option<u64>,
}

pub(crate) struct Resolved {
    pub config: TrainConfig,
    pub members: Vec<ArchSpec>,
    pub views: Vec<ViewPipeline>,
    pub train_set: Dataset,
    pub test_set: Dataset,
}

fn take<T: serde::de::DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    map.remove(key)
        .filter(|v| !v.is_null())
        .map(|v| serde_json::from_value(v).map_err(|e| Error::validation(format!("key `{key}`: {e}"))))
        .transpose()
}

impl TrainRun {
    /// Reads a JSON or TOML run file, or the manifest of an earlier run.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = if path.extension().is_some_and(|e| e == "toml") {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t)?
        } else {
            serde_json::from_str(&text)?
        };
        let value = match value {
            Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
                if m.get("command").and_then(Value::as_str) != Some("train") {
                    return Err(Error::validation("manifest was not written by `train`"));
                }
                m.remove("config").unwrap_or_default()
            }
            v => v,
        };
        Self::from_value(value, path.parent().unwrap_or(Path::new(".")))
    }

    /// Relative paths are taken relative to `base_dir`.
    pub fn from_value(value: Value, base_dir: &Path) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(Error::validation("train config must be a table/object"));
        };
        let mut arch: Option<ArchSpec> = take(&mut map, "arch")?;
        if let Some(file) = take::<PathBuf>(&mut map, "arch_file")? {
            if arch.is_some() {
                return Err(Error::validation("give either `arch` or `arch_file`, not both"));
            }
            let file = base_dir.join(file);
            arch = Some(ArchSpec::from_json(&fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?)?);
        }
        if let Some(a) = &arch {
            a.validate()?;
        }
        let divide = take(&mut map, "divide")?.unwrap_or(true);
        let wd_policy = match take::<String>(&mut map, "wd_policy")? {
            Some(s) => s.parse()?,
            None => WdKind::None,
        };
        let mut data: DataSource = take(&mut map, "data")?.unwrap_or_default();
        data.rebase(base_dir);
        let views = take(&mut map, "views")?.unwrap_or_default();
        let view_seed = take(&mut map, "view_seed")?;
        let seed_given = map.contains_key("base_seed");
        let train: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::validation(format!("train config: {e}")))?;
        Ok(TrainRun {
            train,
            seed_given,
            arch,
            divide,
            wd_policy,
            data,
            views,
            view_seed,
        })
    }

    /// Loads the data and builds the member specs and view pipelines. Fills
    /// in the default architecture so the snapshot records it.
    pub(crate) fn resolve(&mut self) -> Result<Resolved> {
        self.train.validate()?;
        let (train_set, test_set) = self.data.load()?;
        if self.arch.is_none() {
            let dim = train_set.features.row_len() as u32;
            self.arch = Some(ArchSpec::mlp("mlp-64", dim, &[64, 64], train_set.num_classes as u32));
        }
        let arch = self.arch.clone().expect("set above");
        let s = self.train.s;
        let mut config = self.train.clone();
        let members = if self.divide {
            let wd = self.train.weight_decay;
            let policy = WdPolicy::new(self.wd_policy, if wd > 0.0 { wd } else { 1.0 })?;
            let plan = divide_arch(&arch, s, &policy)?;
            if wd > 0.0 {
                config.weight_decay = plan.adjusted_wd;
            }
            plan.members
        } else {
            (0..s)
                .map(|i| ArchSpec {
                    name: format!("{}-m{i}", arch.name),
                    ..arch.clone()
                })
                .collect()
        };
        let seed = self.view_seed.unwrap_or(self.train.base_seed);
        let views = match self.views.len() {
            0 => Vec::new(),
            1 => (0..s as usize)
                .map(|i| ViewPipeline::new(i, seed, self.views[0].clone()))
                .collect::<Result<_>>()?,
            n if n == s as usize => self
                .views
                .iter()
                .enumerate()
                .map(|(i, t)| ViewPipeline::new(i, seed, t.clone()))
                .collect::<Result<_>>()?,
            n => return Err(Error::validation(format!("{n} view lists given for s = {s}"))),
        };
        Ok(Resolved {
            config,
            members,
            views,
            train_set,
            test_set,
        })
    }

    /// The resolved run file; feeding it back reproduces the run.
    pub fn snapshot(&self) -> Result<Value> {
        let Value::Object(mut map) = serde_json::to_value(&self.train)? else {
            return Err(Error::Internal("train config did not serialize to an object".into()));
        };
        map.insert("arch".into(), serde_json::to_value(&self.arch)?);
        map.insert("divide".into(), Value::Bool(self.divide));
        map.insert("wd_policy".into(), serde_json::to_value(self.wd_policy)?);
        map.insert("data".into(), serde_json::to_value(&self.data)?);
        map.insert("views".into(), serde_json::to_value(&self.views)?);
        map.insert("view_seed".into(), serde_json::to_value(self.view_seed)?);
        Ok(Value::Object(map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn splits_train_keys_from_run_keys() {
        let v = json!({
            "s": 2, "max_epoch": 3, "base_seed": 4, "divide": false,
            "data": {"kind": "spirals", "n_total": 60, "n_train": 40, "classes": 3, "noise": 0.1},
            "views": [[{"kind": "feature-jitter", "sigma": 0.1}]],
        });
        let run = TrainRun::from_value(v, Path::new(".")).unwrap();
        assert_eq!(run.train.s, 2);
        assert!(run.seed_given && !run.divide);
        assert_eq!(run.views.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainRun::from_value(json!({"max_epochs": 3}), Path::new(".")).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let v = json!({"s": 2, "max_epoch": 2, "slow_epoch": 1, "cot_warm_epochs": 1, "weight_decay": 5e-4, "wd_policy": "exp",
            "data": {"kind": "blobs", "n_total": 30, "n_train": 20, "classes": 2, "dim": 3, "noise": 0.5}});
        let mut run = TrainRun::from_value(v, Path::new(".")).unwrap();
        let r = run.resolve().unwrap();
        assert!((r.config.weight_decay - 5e-4 * (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(r.members.len(), 2);
        let snap = run.snapshot().unwrap();
        let mut again = TrainRun::from_value(snap.clone(), Path::new(".")).unwrap();
        again.resolve().unwrap();
        assert_eq!(again.snapshot().unwrap(), snap);
    }

    #[test]
    fn toml_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "s = 2\nmax_epoch = 4\n[data]\nkind = \"csv\"\ntrain = \"a.csv\"\ntest = \"b.csv\"\n").unwrap();
        let run = TrainRun::from_file(&p).unwrap();
        assert_eq!(run.train.max_epoch, 4);
        assert_eq!(run.data.input_files()[0], std::path::absolute(dir.path().join("a.csv")).unwrap());
    }
}
