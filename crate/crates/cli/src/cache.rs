use std::path::{Path, PathBuf};

use merton_impact::corrector1d::{shoot_lambda_with, Corrector1D, ShootOptions};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// Files existed but could not be read back.
    Corrupted,
}

/// Hex SHA-256 of `(m, solver options)`; the options carry every tolerance
/// and the `X_max` policy.
pub fn cache_key(m: f64, opts: &ShootOptions) -> String {
    let payload = serde_json::json!({ "m": m, "options": opts });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn cache_stem(dir: &Path, m: f64, opts: &ShootOptions) -> PathBuf {
    dir.join(format!("corrector-{}", cache_key(m, opts)))
}

/// Loads the corrector for `m` from `dir`, solving and storing it on a miss
/// or when the cached files are unreadable.
pub fn load_or_solve(dir: &Path, m: f64, opts: &ShootOptions) -> Result<(Corrector1D, CacheStatus), CliError> {
    let stem = cache_stem(dir, m, opts);
    let present = stem.with_extension("json").exists() || stem.with_extension("csv").exists();
    let mut status = CacheStatus::Miss;
    if present {
        match Corrector1D::load(&stem) {
            Ok(c) if c.m == m => return Ok((c, CacheStatus::Hit)),
            Ok(c) => log::warn!("cached corrector {} holds m = {}, expected {m}; re-solving", stem.display(), c.m),
            Err(e) => log::warn!("corrupted corrector cache {}: {e}; re-solving", stem.display()),
        }
        status = CacheStatus::Corrupted;
    }
    let c = shoot_lambda_with(m, opts).map_err(CliError::from_core)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    c.save(&stem).map_err(CliError::from_core)?;
    Ok((c, status))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_m_and_tolerances() {
        let o = ShootOptions::default();
        assert_eq!(cache_key(3.0, &o), cache_key(3.0, &o.clone()));
        assert_ne!(cache_key(3.0, &o), cache_key(4.0, &o));
        assert_ne!(cache_key(3.0, &o), cache_key(3.0, &ShootOptions { bisect_tol: 1e-9, ..o.clone() }));
        assert_ne!(cache_key(3.0, &o), cache_key(3.0, &ShootOptions { x_max_limit: 1e5, ..o }));
    }

    #[test]
    fn hit_miss_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ShootOptions::default();
        let (a, s1) = load_or_solve(dir.path(), 4.0, &opts).unwrap();
        assert_eq!(s1, CacheStatus::Miss);
        let (b, s2) = load_or_solve(dir.path(), 4.0, &opts).unwrap();
        assert_eq!(s2, CacheStatus::Hit);
        assert_eq!(a.lambda_m, b.lambda_m);
        let csv = cache_stem(dir.path(), 4.0, &opts).with_extension("csv");
        std::fs::write(&csv, "x,w,dw,d2w\n0,garbage,0,0\n").unwrap();
        let (c, s3) = load_or_solve(dir.path(), 4.0, &opts).unwrap();
        assert_eq!(s3, CacheStatus::Corrupted);
        assert_eq!(c.lambda_m, a.lambda_m);
        assert_eq!(load_or_solve(dir.path(), 4.0, &opts).unwrap().1, CacheStatus::Hit);
    }
}
