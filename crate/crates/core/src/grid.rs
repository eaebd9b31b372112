//! Prediction grids and municipality averaging for interpolated surfaces.

use serde::{Deserialize, Serialize};

use crate::calendar::DayKey;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::geometry::Point;
use crate::tps::TpsModel;
use crate::types::{ExposureSurface, MethodTag, MunicipalityMap, Provenance};

/// Prediction locations: every municipality centroid plus a square lattice
/// clipped to the region. Each point carries a municipality assignment;
/// centroids always belong to their own municipality, lattice points to the
/// polygon that contains them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub points: Vec<Point>,
    /// Municipality index per point.
    pub membership: Vec<usize>,
    pub n_centroids: usize,
    pub n_lattice: usize,
    /// Point indices per municipality, nearest-point fallback applied.
    muni_points: Vec<Vec<usize>>,
    pub lattice_spacing: Option<f64>,
}

/// Lattice point count for a given spacing: cell-center lattice over the
/// bounding box, keeping points inside some municipality.
fn lattice_points(map: &MunicipalityMap, spacing: f64) -> Vec<(Point, usize)> {
    let (lo, hi) = {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for m in map.iter() {
            let (l, h) = m.geometry.bbox();
            lo.x = lo.x.min(l.x);
            lo.y = lo.y.min(l.y);
            hi.x = hi.x.max(h.x);
            hi.y = hi.y.max(h.y);
        }
        (lo, hi)
    };
    let nx = (((hi.x - lo.x) / spacing).ceil() as usize).max(1);
    let ny = (((hi.y - lo.y) / spacing).ceil() as usize).max(1);
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let p = Point::new(
                lo.x + (i as f64 + 0.5) * spacing,
                lo.y + (j as f64 + 0.5) * spacing,
            );
            if let Some(mi) = map.containing(&p) {
                out.push((p, mi));
            }
        }
    }
    out
}

/// Build a grid with approximately `n_lattice` clipped lattice points. With
/// `spacing` given, that spacing is used verbatim (this is how exact
/// historical grid sizes are reproduced); otherwise the spacing is searched
/// so the clipped count comes as close as possible to the request.
pub fn build_grid(
    map: &MunicipalityMap,
    n_lattice: usize,
    spacing: Option<f64>,
) -> Result<PredictionGrid> {
    let chosen_spacing = match spacing {
        Some(s) => {
            if !(s > 0.0) {
                return Err(CoreError::InvalidConfig("lattice spacing must be > 0".into()));
            }
            Some(s)
        }
        None if n_lattice == 0 => None,
        None => {
            // Area-based initial guess, then a refinement scan.
            let area: f64 = map.iter().map(|m| m.area_km2).sum();
            let s0 = (area / n_lattice as f64).sqrt();
            let mut best: Option<(usize, f64)> = None;
            for k in -40i32..=40 {
                let s = s0 * 1.03f64.powi(k);
                let count = lattice_points(map, s).len();
                let diff = count.abs_diff(n_lattice);
                if best.map_or(true, |(d, _)| diff < d) {
                    best = Some((diff, s));
                }
            }
            Some(best.expect("non-empty scan").1)
        }
    };

    let mut points: Vec<Point> = map.iter().map(|m| m.centroid).collect();
    let mut membership: Vec<usize> = (0..map.len()).collect();
    let n_centroids = points.len();
    let mut n_lat = 0;
    if let Some(s) = chosen_spacing {
        for (p, mi) in lattice_points(map, s) {
            points.push(p);
            membership.push(mi);
            n_lat += 1;
        }
    }

    let mut muni_points: Vec<Vec<usize>> = vec![Vec::new(); map.len()];
    for (i, &mi) in membership.iter().enumerate() {
        muni_points[mi].push(i);
    }
    // A municipality whose centroid list ended up empty cannot happen here
    // (centroids are always assigned), but keep the nearest-point fallback
    // for robustness if the assignment scheme changes.
    for (mi, pts) in muni_points.iter_mut().enumerate() {
        if pts.is_empty() {
            let c = map.get(mi).centroid;
            let nearest = points
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.dist2(&c).partial_cmp(&b.dist2(&c)).unwrap())
                .map(|(i, _)| i)
                .ok_or_else(|| CoreError::Geometry("empty grid".into()))?;
            pts.push(nearest);
        }
    }

    Ok(PredictionGrid {
        points,
        membership,
        n_centroids,
        n_lattice: n_lat,
        muni_points,
        lattice_spacing: chosen_spacing,
    })
}

impl PredictionGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_of(&self, muni: usize) -> &[usize] {
        &self.muni_points[muni]
    }

    /// Unweighted mean of point values within each municipality.
    /// Linear in the values: commutes with affine maps of the field.
    pub fn municipality_average(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.points.len() {
            return Err(CoreError::LengthMismatch {
                context: "grid values".into(),
                got: values.len(),
                want: self.points.len(),
            });
        }
        Ok(self
            .muni_points
            .iter()
            .map(|idx| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
            .collect())
    }
}

/// Interpolate one day of station values to the grid.
pub fn interpolate_day(
    station_locs: &[Point],
    station_values: &[f64],
    grid: &PredictionGrid,
    lambda: f64,
) -> Result<Vec<f64>> {
    let model = TpsModel::fit(station_locs, station_values, lambda)?;
    Ok(model.predict_many(&grid.points))
}

/// Interpolate a day-by-station matrix to a municipality-by-day surface:
/// per-day thin plate spline, grid evaluation, municipality averaging.
/// Days run in parallel; output ordering is fixed by the inputs.
pub fn interpolate_surface(
    station_locs: &[Point],
    day_values: &[Vec<f64>],
    days: &[DayKey],
    grid: &PredictionGrid,
    map: &MunicipalityMap,
    lambda: f64,
    method: MethodTag,
    provenance: Provenance,
) -> Result<ExposureSurface> {
    if day_values.len() != days.len() {
        return Err(CoreError::LengthMismatch {
            context: "surface days".into(),
            got: day_values.len(),
            want: days.len(),
        });
    }
    let per_day: Vec<Result<Vec<f64>>> = exec::map(day_values, |vals| {
        let g = interpolate_day(station_locs, vals, grid, lambda)?;
        grid.municipality_average(&g)
    });
    let mut columns = Vec::with_capacity(days.len());
    for c in per_day {
        columns.push(c?);
    }
    let n_mun = map.len();
    let mut values = vec![0.0; n_mun * days.len()];
    for (d, col) in columns.iter().enumerate() {
        for (m, v) in col.iter().enumerate() {
            values[m * days.len() + d] = *v;
        }
    }
    ExposureSurface::new(
        method,
        map.iter().map(|m| m.id.clone()).collect(),
        days.to_vec(),
        values,
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{MultiPolygon, Polygon, Ring};
    use crate::types::MunicipalityId;
    use approx::assert_relative_eq;

    fn square_map(k: usize, side: f64) -> MunicipalityMap {
        let mut entries = Vec::new();
        for j in 0..k {
            for i in 0..k {
                let (x0, y0) = (i as f64 * side, j as f64 * side);
                let ring = Ring::new(vec![
                    Point::new(x0, y0),
                    Point::new(x0 + side, y0),
                    Point::new(x0 + side, y0 + side),
                    Point::new(x0, y0 + side),
                ])
                .unwrap();
                entries.push((
                    MunicipalityId::new(format!("m{i}_{j}")),
                    MultiPolygon::new(vec![Polygon::new(ring, vec![])]).unwrap(),
                    100.0,
                ));
            }
        }
        MunicipalityMap::new(entries).unwrap()
    }

    #[test]
    fn grid_count_is_centroids_plus_lattice() {
        let map = square_map(4, 10.0);
        let g = build_grid(&map, 100, None).unwrap();
        assert_eq!(g.len(), g.n_centroids + g.n_lattice);
        assert_eq!(g.n_centroids, 16);
        // Square region: the request should be met exactly.
        assert_eq!(g.n_lattice, 100);
    }

    #[test]
    fn zero_lattice_request_gives_centroids_only() {
        let map = square_map(3, 5.0);
        let g = build_grid(&map, 0, None).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.n_lattice, 0);
    }

    #[test]
    fn explicit_spacing_is_respected() {
        let map = square_map(2, 10.0);
        let g = build_grid(&map, 0, Some(5.0)).unwrap();
        // 20x20 box at spacing 5 -> 4x4 interior cell centers.
        assert_eq!(g.n_lattice, 16);
        assert_eq!(g.lattice_spacing, Some(5.0));
    }

    #[test]
    fn every_municipality_has_points() {
        let map = square_map(5, 4.0);
        let g = build_grid(&map, 37, None).unwrap();
        for mi in 0..map.len() {
            assert!(!g.points_of(mi).is_empty());
        }
    }

    #[test]
    fn averaging_commutes_with_affine_maps() {
        let map = square_map(3, 7.0);
        let g = build_grid(&map, 40, None).unwrap();
        let vals: Vec<f64> = g.points.iter().map(|p| p.x * 0.3 + p.y * 0.1).collect();
        let avg = g.municipality_average(&vals).unwrap();
        let mapped: Vec<f64> = vals.iter().map(|v| 2.0 * v - 5.0).collect();
        let avg_mapped = g.municipality_average(&mapped).unwrap();
        for (a, am) in avg.iter().zip(&avg_mapped) {
            assert_relative_eq!(2.0 * a - 5.0, *am, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_field_surfaces_constant() {
        let map = square_map(3, 8.0);
        let g = build_grid(&map, 60, None).unwrap();
        let locs = vec![
            Point::new(2.0, 3.0),
            Point::new(20.0, 5.0),
            Point::new(12.0, 19.0),
            Point::new(5.0, 14.0),
        ];
        let vals = vec![21.5; 4];
        let out = interpolate_day(&locs, &vals, &g, 0.001).unwrap();
        for v in out {
            assert_relative_eq!(v, 21.5, epsilon = 1e-8);
        }
    }
}
