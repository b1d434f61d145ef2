//! Hardware profile resolution: bundled presets, files, a profile
//! directory, and per-field overrides.

use std::collections::BTreeMap;
use std::path::Path;

use attnlab_core::roofline::{bundled_profiles, load_profiles_file, HardwareProfile};

use crate::error::{CliError, CliResult};

/// Directory of extra `*.toml` profile files merged over the presets.
pub const PROFILE_DIR_ENV: &str = "ATTNLAB_PROFILE_DIR";

/// Presets plus every profile found in `dir`. Later files win on name clashes.
pub fn known_profiles(dir: Option<&Path>) -> CliResult<BTreeMap<String, HardwareProfile>> {
    let mut all = bundled_profiles()?;
    if let Some(dir) = dir {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        for f in files {
            all.extend(load_profiles_file(&f)?);
        }
    }
    Ok(all)
}

/// Resolves `name_or_path` as a file path if one exists, else as a profile name.
/// A file must define exactly one profile.
pub fn resolve(name_or_path: &str, dir: Option<&Path>, overrides: &[String]) -> CliResult<HardwareProfile> {
    let path = Path::new(name_or_path);
    let base = if path.is_file() {
        let profiles = load_profiles_file(path)?;
        if profiles.len() != 1 {
            let names: Vec<_> = profiles.keys().cloned().collect();
            return Err(CliError::Usage(format!(
                "{name_or_path} defines {} profiles ({}); expected exactly one",
                names.len(),
                names.join(", ")
            )));
        }
        profiles.into_values().next().expect("one profile")
    } else {
        let all = known_profiles(dir)?;
        all.get(name_or_path).cloned().ok_or_else(|| attnlab_core::Error::UnknownProfile {
            name: name_or_path.to_string(),
            known: all.keys().cloned().collect::<Vec<_>>().join(", "),
        })?
    };
    apply_overrides(base, overrides)
}

/// Applies `field=value` overrides, with values parsed as JSON numbers.
pub fn apply_overrides(profile: HardwareProfile, overrides: &[String]) -> CliResult<HardwareProfile> {
    if overrides.is_empty() {
        return Ok(profile);
    }
    let mut value = serde_json::to_value(&profile)?;
    let fields = value.as_object_mut().expect("profile serializes to an object");
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {o:?} is not FIELD=VALUE")))?;
        let slot = fields
            .get_mut(key)
            .ok_or_else(|| CliError::Usage(format!("unknown profile field {key:?}")))?;
        *slot = serde_json::from_str(raw).map_err(|_| CliError::Usage(format!("bad value for {key}: {raw:?}")))?;
    }
    let out: HardwareProfile =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("profile override: {e}")))?;
    out.validate()?;
    Ok(out)
}
