//! Shared identifiers and data carriers used across the pipeline.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calendar::DayKey;
use crate::error::{CoreError, Result};
use crate::geometry::{MultiPolygon, Point};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new<S: Into<String>>(s: S) -> Self {
                $name(s.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }
    };
}

id_type!(
    /// Weather station identifier.
    SiteId
);
id_type!(
    /// Municipality identifier.
    MunicipalityId
);
id_type!(
    /// Reanalysis grid cell identifier.
    CellId
);

/// Which of the three construction routes produced an exposure surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MethodTag {
    /// Quantile autoregression surface at the given quantile level.
    GqrmTau(f64),
    /// Per-year Gaussian process surface.
    Ggpm,
    /// Area-weighted gridded reanalysis.
    Reanalysis,
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodTag::GqrmTau(tau) => write!(f, "gqrm-{tau}"),
            MethodTag::Ggpm => f.write_str("ggpm"),
            MethodTag::Reanalysis => f.write_str("reanalysis"),
        }
    }
}

impl MethodTag {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "ggpm" {
            Ok(MethodTag::Ggpm)
        } else if s == "reanalysis" {
            Ok(MethodTag::Reanalysis)
        } else if let Some(tau) = s.strip_prefix("gqrm-") {
            let tau: f64 = tau
                .parse()
                .map_err(|_| CoreError::InvalidConfig(format!("bad method tag {s}")))?;
            Ok(MethodTag::GqrmTau(tau))
        } else {
            Err(CoreError::InvalidConfig(format!("unknown method tag {s}")))
        }
    }
}

/// Standardization fitted on station altitudes and reused verbatim at
/// prediction sites, so model covariates mean the same thing everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AltitudeTransform {
    pub mean: f64,
    pub sd: f64,
}

impl AltitudeTransform {
    /// Sample mean and sample standard deviation (n-1 denominator).
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(CoreError::InvalidConfig(
                "altitude standardization needs at least two values".into(),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        let sd = (ss / (n - 1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(CoreError::InvalidConfig(
                "altitude standardization needs at least two distinct values".into(),
            ));
        }
        Ok(AltitudeTransform { mean, sd })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// One station's daily-maximum series aligned to a study calendar;
/// `values[i]` corresponds to `calendar.days()[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSeries {
    pub id: SiteId,
    pub loc: Point,
    pub alt_m: f64,
    pub values: Vec<Option<f64>>,
}

impl StationSeries {
    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

/// A municipality with derived planar geometry attributes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Municipality {
    pub id: MunicipalityId,
    pub geometry: MultiPolygon,
    pub centroid: Point,
    pub area_km2: f64,
    pub alt_m: f64,
}

/// Ordered municipality registry; iteration order is the (stable) input
/// order, lookups go through the id index.
#[derive(Debug, Clone)]
pub struct MunicipalityMap {
    munis: Vec<Municipality>,
    index: HashMap<MunicipalityId, usize>,
}

impl MunicipalityMap {
    pub fn new(entries: Vec<(MunicipalityId, MultiPolygon, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(CoreError::Geometry("no municipalities".into()));
        }
        let mut munis = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (id, geometry, alt_m) in entries {
            if index.contains_key(&id) {
                return Err(CoreError::Geometry(format!("duplicate municipality {id}")));
            }
            let area_km2 = geometry.area();
            if !(area_km2 > 0.0) {
                return Err(CoreError::Geometry(format!(
                    "municipality {id} has non-positive area"
                )));
            }
            let centroid = geometry.centroid();
            index.insert(id.clone(), munis.len());
            munis.push(Municipality {
                id,
                geometry,
                centroid,
                area_km2,
                alt_m,
            });
        }
        Ok(MunicipalityMap { munis, index })
    }

    pub fn len(&self) -> usize {
        self.munis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.munis.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Municipality> {
        self.munis.iter()
    }

    pub fn get(&self, idx: usize) -> &Municipality {
        &self.munis[idx]
    }

    pub fn index_of(&self, id: &MunicipalityId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &MunicipalityId) -> Option<&Municipality> {
        self.index_of(id).map(|i| &self.munis[i])
    }

    /// Municipality containing the point, resolved by even-odd membership.
    pub fn containing(&self, p: &Point) -> Option<usize> {
        self.munis.iter().position(|m| m.geometry.contains(p))
    }
}

/// Provenance block embedded next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<String>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub notes: std::collections::BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: impl Into<String>, source: impl Into<String>) -> Self {
        Provenance {
            seed,
            config_hash: config_hash.into(),
            source: source.into(),
            projection: None,
            notes: std::collections::BTreeMap::new(),
        }
    }
}

/// Complete municipality-by-day exposure matrix for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExposureSurface {
    pub method: MethodTag,
    pub municipalities: Vec<MunicipalityId>,
    pub days: Vec<DayKey>,
    /// Row-major `municipalities.len() x days.len()`; never NaN.
    values: Vec<f64>,
    pub provenance: Provenance,
}

impl ExposureSurface {
    pub fn new(
        method: MethodTag,
        municipalities: Vec<MunicipalityId>,
        days: Vec<DayKey>,
        values: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let want = municipalities.len() * days.len();
        if values.len() != want {
            return Err(CoreError::LengthMismatch {
                context: "exposure surface".into(),
                got: values.len(),
                want,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "exposure surface".into(),
            });
        }
        Ok(ExposureSurface {
            method,
            municipalities,
            days,
            values,
            provenance,
        })
    }

    pub fn n_munis(&self) -> usize {
        self.municipalities.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn get(&self, muni: usize, day: usize) -> f64 {
        self.values[muni * self.days.len() + day]
    }

    pub fn row(&self, muni: usize) -> &[f64] {
        let w = self.days.len();
        &self.values[muni * w..(muni + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value for `(municipality id, date)`, if covered.
    pub fn lookup(&self, id: &MunicipalityId, date: chrono::NaiveDate) -> Option<f64> {
        let m = self.municipalities.iter().position(|x| x == id)?;
        let d = self.days.iter().position(|k| k.date == date)?;
        Some(self.get(m, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_standardization() {
        let t = AltitudeTransform::fit(&[0.0, 100.0]).unwrap();
        assert_relative_eq!(t.apply(0.0), -0.7071, epsilon = 1e-4);
        assert_relative_eq!(t.apply(100.0), 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn three_point_standardization() {
        let t = AltitudeTransform::fit(&[100.0, 200.0, 300.0]).unwrap();
        let z: Vec<f64> = [100.0, 200.0, 300.0].iter().map(|&v| t.apply(v)).collect();
        assert_relative_eq!(z[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(z[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(z[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_altitudes_rejected() {
        assert!(AltitudeTransform::fit(&[5.0, 5.0, 5.0]).is_err());
        assert!(AltitudeTransform::fit(&[5.0]).is_err());
    }

    #[test]
    fn method_tags_roundtrip() {
        for tag in [
            MethodTag::GqrmTau(0.5),
            MethodTag::GqrmTau(0.95),
            MethodTag::Ggpm,
            MethodTag::Reanalysis,
        ] {
            let s = tag.to_string();
            assert_eq!(MethodTag::parse(&s).unwrap(), tag);
        }
        assert_eq!(MethodTag::GqrmTau(0.5).to_string(), "gqrm-0.5");
    }

    #[test]
    fn surface_rejects_nan_and_bad_shape() {
        let prov = Provenance::new(1, "h", "test");
        let day = DayKey {
            year: 1,
            day: 1,
            date: chrono::NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
        };
        let m = vec![MunicipalityId::new("a")];
        assert!(ExposureSurface::new(
            MethodTag::Ggpm,
            m.clone(),
            vec![day],
            vec![f64::NAN],
            prov.clone()
        )
        .is_err());
        assert!(
            ExposureSurface::new(MethodTag::Ggpm, m, vec![day], vec![1.0, 2.0], prov).is_err()
        );
    }
}
