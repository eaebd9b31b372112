//! Point summaries of a fitted chain and the quantile predictions built
//! from them.
//!
//! Downstream surfaces use a single plug-in state assembled from
//! componentwise posterior medians. Quantile values come in two flavors:
//! the systematic value `q[t, l](s)` used for mapping, and the one-day
//! conditional value that folds in the previous day's observation, used to
//! check calibration against held data.

use super::design::Design;
use super::{GqrmSamples, GqrmState};
use crate::error::{CoreError, Result};

fn median_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Componentwise posterior medians as one plug-in state.
pub fn median_state(samples: &GqrmSamples) -> Result<GqrmState> {
    let m = samples.n_kept();
    if m == 0 {
        return Err(CoreError::EmptySelection {
            rule: "no kept draws to summarize".into(),
        });
    }
    let n = samples.n_sites;
    let t_n = samples.n_years;
    let vec_median = |draws: &Vec<Vec<f64>>, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| median_of(draws.iter().map(|d| d[i]).collect()))
            .collect()
    };
    Ok(GqrmState {
        coef: std::array::from_fn(|p| median_of(samples.coef.iter().map(|c| c[p]).collect())),
        site_intercept: vec_median(&samples.site_intercept, n),
        site_slope: vec_median(&samples.site_slope, n),
        year_effect: vec_median(&samples.year_effect, t_n),
        site_year: vec_median(&samples.site_year, n * t_n),
        z_rho: vec_median(&samples.z_rho, n),
        z_sigma: vec_median(&samples.z_sigma, n),
        zbar_rho: median_of(samples.zbar_rho.clone()),
        zbar_sigma: median_of(samples.zbar_sigma.clone()),
        variances: std::array::from_fn(|i| {
            median_of(samples.variances.iter().map(|v| v[i]).collect())
        }),
        decays: std::array::from_fn(|i| {
            median_of(samples.decays.iter().map(|d| d[i]).collect())
        }),
    })
}

/// Systematic quantile on the centered scale.
fn systematic_internal(
    design: &Design,
    state: &GqrmState,
    site: usize,
    year: usize,
    day: usize,
) -> f64 {
    let tc = design.year_centered[year];
    let c = &state.coef;
    c[0] + c[1] * tc
        + c[2] * design.sin_day[day]
        + c[3] * design.cos_day[day]
        + c[4] * design.alt[site]
        + state.site_intercept[site]
        + state.site_slope[site] * tc
        + state.year_effect[year]
        + state.site_year[year * design.n_sites + site]
}

/// Systematic quantile on the original data scale.
pub fn systematic_quantile(
    design: &Design,
    state: &GqrmState,
    site: usize,
    year: usize,
    day: usize,
) -> f64 {
    systematic_internal(design, state, site, year, day) + design.center
}

/// Quantile conditional on the previous day's observation (original scale).
/// Day is 0-based within the season and must be at least 1.
pub fn conditional_quantile(
    design: &Design,
    state: &GqrmState,
    site: usize,
    year: usize,
    day: usize,
    y_prev: f64,
) -> Result<f64> {
    if day == 0 {
        return Err(CoreError::InvalidConfig(
            "the first season day has no previous day to condition on".into(),
        ));
    }
    let rho = state.rho(site);
    Ok(systematic_quantile(design, state, site, year, day)
        + rho * (y_prev - systematic_quantile(design, state, site, year, day - 1)))
}

/// Fraction of likelihood rows lying at or below their conditional
/// quantile; calibrated fits put this near the target level.
pub fn coverage(design: &Design, state: &GqrmState) -> f64 {
    let mut covered = 0usize;
    for r in &design.rows {
        let s = r.site as usize;
        let t = r.year as usize;
        let d = r.day as usize;
        let q = systematic_internal(design, state, s, t, d)
            + state.rho(s) * (r.y_prev - systematic_internal(design, state, s, t, d - 1));
        if r.y <= q {
            covered += 1;
        }
    }
    covered as f64 / design.rows.len() as f64
}

/// Systematic quantiles for every station, year and season day, laid out
/// `[(site * n_years + year) * season_len + day]` on the original scale.
pub fn station_quantiles(design: &Design, state: &GqrmState) -> Vec<f64> {
    let mut out = Vec::with_capacity(design.n_sites * design.n_years * design.season_len);
    for s in 0..design.n_sites {
        for t in 0..design.n_years {
            for d in 0..design.season_len {
                out.push(systematic_quantile(design, state, s, t, d));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gqrm::design::build_design;
    use crate::gqrm::sampler::run_chain;
    use crate::gqrm::{simulate_panel, GqrmConfig, PanelSim};
    use crate::rng::substream;

    fn sim(
        n_sites: usize,
        n_years: usize,
        season_len: usize,
        rho: f64,
        seed: u64,
    ) -> crate::gqrm::PanelData {
        let spec = PanelSim {
            n_sites,
            n_years,
            season_len,
            rho,
            ..Default::default()
        };
        simulate_panel(&spec, &mut substream(seed, "gqrm-panel-sim"))
    }

    fn tiny_samples() -> GqrmSamples {
        let mut s = GqrmSamples {
            n_sites: 2,
            n_years: 1,
            center: 20.0,
            ..Default::default()
        };
        for (a, b) in [(1.0, 5.0), (3.0, 4.0), (2.0, 6.0)] {
            s.coef.push([a, 0.0, 0.0, 0.0, 0.0]);
            s.site_intercept.push(vec![b, -b]);
            s.site_slope.push(vec![0.0, 0.0]);
            s.year_effect.push(vec![a]);
            s.site_year.push(vec![0.0, 0.0]);
            s.z_rho.push(vec![0.1 * a, 0.0]);
            s.z_sigma.push(vec![0.0, 0.0]);
            s.zbar_rho.push(a);
            s.zbar_sigma.push(0.0);
            s.variances.push([a, 1.0, 1.0, 1.0, 1.0, 1.0]);
            s.decays.push([b, 1.0, 1.0, 1.0, 1.0]);
        }
        s
    }

    #[test]
    fn medians_are_componentwise() {
        let state = median_state(&tiny_samples()).unwrap();
        assert_eq!(state.coef[0], 2.0);
        assert_eq!(state.site_intercept, vec![5.0, -5.0]);
        assert_eq!(state.zbar_rho, 2.0);
        assert_eq!(state.variances[0], 2.0);
        assert_eq!(state.decays[0], 5.0);
        assert!((state.z_rho[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn empty_samples_error() {
        let s = GqrmSamples::default();
        assert!(median_state(&s).is_err());
    }

    #[test]
    fn conditioning_on_the_previous_quantile_is_neutral() {
        let panel = sim(4, 2, 15, 0.3, 40);
        let design = build_design(&panel).unwrap();
        let state = GqrmState {
            coef: [0.3, 0.01, 0.5, -0.2, 0.1],
            site_intercept: vec![0.1, -0.1, 0.2, 0.0],
            site_slope: vec![0.0, 0.01, -0.01, 0.0],
            year_effect: vec![0.05, -0.05],
            site_year: vec![0.0; 8],
            z_rho: vec![0.4, 0.2, 0.0, -0.2],
            z_sigma: vec![0.0; 4],
            zbar_rho: 0.2,
            zbar_sigma: 0.0,
            variances: [1.0; 6],
            decays: [0.07; 5],
        };
        let prev = systematic_quantile(&design, &state, 2, 1, 4);
        let cond = conditional_quantile(&design, &state, 2, 1, 5, prev).unwrap();
        let sys = systematic_quantile(&design, &state, 2, 1, 5);
        assert!((cond - sys).abs() < 1e-12);
        assert!(conditional_quantile(&design, &state, 2, 1, 0, 0.0).is_err());
    }

    #[test]
    fn short_chain_coverage_is_near_the_target() {
        let panel = sim(5, 3, 40, 0.4, 11);
        let cfg = GqrmConfig {
            tau: 0.5,
            burn_in: 300,
            keep: 300,
            checkpoint_every: 0,
            ..Default::default()
        };
        let run = run_chain(&panel, &cfg, substream(63, "gqrm-coverage")).unwrap();
        let design = build_design(&panel).unwrap();
        let state = median_state(&run.samples).unwrap();
        let cov = coverage(&design, &state);
        assert!(
            (cov - 0.5).abs() < 0.08,
            "coverage {cov} too far from 0.5"
        );
    }

    #[test]
    fn station_quantile_layout_matches_direct_evaluation() {
        let panel = sim(3, 2, 10, 0.2, 8);
        let design = build_design(&panel).unwrap();
        let state = GqrmState {
            coef: [1.0, 0.0, 0.0, 0.0, 0.0],
            site_intercept: vec![0.0; 3],
            site_slope: vec![0.0; 3],
            year_effect: vec![0.0; 2],
            site_year: vec![0.0; 6],
            z_rho: vec![0.0; 3],
            z_sigma: vec![0.0; 3],
            zbar_rho: 0.0,
            zbar_sigma: 0.0,
            variances: [1.0; 6],
            decays: [0.07; 5],
        };
        let q = station_quantiles(&design, &state);
        assert_eq!(q.len(), 3 * 2 * 10);
        let idx = (2 * 2 + 1) * 10 + 7;
        assert_eq!(q[idx], systematic_quantile(&design, &state, 2, 1, 7));
    }
}
