//! 3GPP TR 38.901 UMi street-canyon pathloss with a deterministic,
//! map-derived LoS condition.

use super::{PathlossGrid, PropagationConfig, FLOOR_DBM};
use crate::error::{Error, Result};
use crate::geo::{link_geometry, BuildingMap, LinkGeometry, Pixel, TxLocation};

/// Links shorter than this (2D, m) are outside the model; they are reported
/// as near field and rendered at full power.
pub const NEAR_FIELD_M: f64 = 10.0;
/// Upper validity limit of the model (2D, m).
const MAX_D2D_M: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UmiPathloss {
    /// `d_2d` below [`NEAR_FIELD_M`].
    NearField,
    /// Pathloss in dB.
    Loss(f64),
}

impl UmiPathloss {
    /// Received power for a transmit power, with the near field pinned to
    /// the transmit power itself (gray 255 at 0 dBm).
    pub fn rx_power_dbm(self, p_tx_dbm: f64) -> f64 {
        match self {
            UmiPathloss::NearField => p_tx_dbm,
            UmiPathloss::Loss(pl) => p_tx_dbm - pl,
        }
    }
}

/// Breakpoint distance `2 pi h_bs h_ut fc / c` with `fc` in Hz.
pub fn breakpoint_distance(cfg: &PropagationConfig) -> f64 {
    2.0 * std::f64::consts::PI * cfg.h_bs * cfg.h_ut * (cfg.fc_ghz * 1e9) / cfg.c
}

/// UMi pathloss. Frequencies enter the loss formulas in GHz.
pub fn pathloss_umi(geom: &LinkGeometry, cfg: &PropagationConfig) -> Result<UmiPathloss> {
    if geom.d_2d > MAX_D2D_M {
        return Err(Error::Domain(format!(
            "d_2d = {:.1} m beyond the 5 km model range",
            geom.d_2d
        )));
    }
    if geom.d_2d < NEAR_FIELD_M {
        return Ok(UmiPathloss::NearField);
    }
    let d_bp = breakpoint_distance(cfg);
    let log_fc = cfg.fc_ghz.log10();
    let log_d3 = geom.d_3d.log10();
    let pl_los = if geom.d_2d <= d_bp {
        32.4 + 21.0 * log_d3 + 20.0 * log_fc
    } else {
        let dh = cfg.h_bs - cfg.h_ut;
        32.4 + 40.0 * log_d3 + 20.0 * log_fc - 9.5 * (d_bp * d_bp + dh * dh).log10()
    };
    if geom.los {
        return Ok(UmiPathloss::Loss(pl_los));
    }
    let pl_nlos = 22.4 + 35.3 * log_d3 + 21.3 * log_fc - 0.6 * (cfg.h_ut - 1.5);
    Ok(UmiPathloss::Loss(pl_los.max(pl_nlos)))
}

/// Evaluates [`pathloss_umi`] at every RoI pixel. Pixels beyond the model
/// range stay at the floor.
pub fn pathloss_map_3gpp(
    map: &BuildingMap,
    tx: &TxLocation,
    cfg: &PropagationConfig,
) -> Result<PathlossGrid> {
    cfg.validate()?;
    let tx = TxLocation::new(map, tx.x, tx.y, tx.h_bs)?;
    let cfg = PropagationConfig {
        h_bs: tx.h_bs,
        ..*cfg
    };
    let mut grid = PathlossGrid::empty(map, &tx);
    let n = map.size();
    for y in 0..n {
        for x in 0..n {
            if !grid.roi_mask[y * n + x] {
                continue;
            }
            let geom = link_geometry(map, &tx, Pixel::new(x, y), cfg.h_ut);
            let p = match pathloss_umi(&geom, &cfg) {
                Ok(pl) => pl.rx_power_dbm(cfg.p_tx_dbm).max(FLOOR_DBM),
                Err(_) => FLOOR_DBM,
            };
            grid.values[y * n + x] = p as f32;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::ObstacleClass;

    fn cfg(fc_ghz: f64) -> PropagationConfig {
        PropagationConfig {
            fc_ghz,
            ..PropagationConfig::default()
        }
    }

    fn geom(d_2d: f64, los: bool) -> LinkGeometry {
        let dh: f64 = 8.5;
        LinkGeometry {
            d_2d,
            d_3d: (d_2d * d_2d + dh * dh).sqrt(),
            los,
        }
    }

    fn loss(p: UmiPathloss) -> f64 {
        match p {
            UmiPathloss::Loss(v) => v,
            UmiPathloss::NearField => panic!("near field"),
        }
    }

    #[test]
    fn breakpoint_hand_values() {
        assert!((breakpoint_distance(&cfg(3.0)) - 942.48).abs() < 0.01);
        assert!((breakpoint_distance(&cfg(2.5)) - 785.40).abs() < 0.01);
        let ratio = breakpoint_distance(&cfg(6.0)) / breakpoint_distance(&cfg(3.0));
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn los_and_nlos_at_100m() {
        let g = LinkGeometry {
            d_2d: 99.0,
            d_3d: 100.0,
            los: true,
        };
        let los = loss(pathloss_umi(&g, &cfg(3.0)).unwrap());
        assert!((los - 83.94).abs() < 0.01, "{los}");
        let nlos = loss(pathloss_umi(&LinkGeometry { los: false, ..g }, &cfg(3.0)).unwrap());
        assert!((nlos - 103.16).abs() < 0.01, "{nlos}");
    }

    #[test]
    fn nlos_never_below_los() {
        for d in [10.0, 20.0, 55.0, 300.0, 900.0, 1500.0, 4999.0] {
            let l = loss(pathloss_umi(&geom(d, true), &cfg(3.0)).unwrap());
            let n = loss(pathloss_umi(&geom(d, false), &cfg(3.0)).unwrap());
            assert!(n >= l, "d={d}: {n} < {l}");
        }
    }

    #[test]
    fn continuous_at_breakpoint() {
        let c = cfg(3.0);
        let d_bp = breakpoint_distance(&c);
        let below = loss(pathloss_umi(&geom(d_bp, true), &c).unwrap());
        let above = loss(pathloss_umi(&geom(d_bp + 1e-9, true), &c).unwrap());
        assert!((below - above).abs() < 0.5, "{below} vs {above}");
    }

    #[test]
    fn near_field_and_range_limits() {
        assert_eq!(
            pathloss_umi(&geom(9.99, true), &cfg(3.0)).unwrap(),
            UmiPathloss::NearField
        );
        assert!(matches!(
            pathloss_umi(&geom(5000.1, true), &cfg(3.0)),
            Err(Error::Domain(_))
        ));
        assert_eq!(UmiPathloss::NearField.rx_power_dbm(0.0), 0.0);
    }

    #[test]
    fn open_map_decays_with_distance() {
        let map = BuildingMap::all_free("open", 64, 2.0).unwrap();
        let tx = TxLocation::new(&map, 32, 32, 10.0).unwrap();
        let grid = pathloss_map_3gpp(&map, &tx, &cfg(3.0)).unwrap();
        // along +x from the TX beyond the near field
        let mut prev = f32::INFINITY;
        for x in 38..64 {
            let v = grid.get(x, 32);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(grid.get(32, 32), 0.0);
        assert_eq!(grid.get(34, 32), 0.0);
    }

    #[test]
    fn shadowed_pixel_not_above_los_value() {
        let mut map = BuildingMap::all_free("wall", 64, 2.0).unwrap();
        for y in 20..44 {
            map.set(Pixel::new(40, y), ObstacleClass::Building).unwrap();
        }
        let tx = TxLocation::new(&map, 32, 32, 10.0).unwrap();
        let grid = pathloss_map_3gpp(&map, &tx, &cfg(3.0)).unwrap();
        let open = pathloss_map_3gpp(
            &BuildingMap::all_free("o", 64, 2.0).unwrap(),
            &tx,
            &cfg(3.0),
        )
        .unwrap();
        assert!(grid.get(50, 32) < open.get(50, 32));
        assert!(!grid.in_roi(40, 30));
        for y in 0..64 {
            for x in 0..64 {
                if grid.in_roi(x, y) {
                    assert!(grid.get(x, y) <= open.get(x, y));
                }
            }
        }
    }

    #[test]
    fn map_pixel_equals_scalar_call() {
        let map = crate::geo::generate_map(&crate::geo::MapGenParams {
            seed: 9,
            size: 64,
            density: 0.25,
            meters_per_pixel: 1.72,
            ..Default::default()
        })
        .unwrap();
        let c = cfg(3.0);
        let centre = map
            .free_cells()
            .min_by_key(|p| (p.x as i64 - 32).abs() + (p.y as i64 - 32).abs())
            .unwrap();
        let tx = TxLocation::new(&map, centre.x, centre.y, 10.0).unwrap();
        let grid = pathloss_map_3gpp(&map, &tx, &c).unwrap();
        let mut checked = 0;
        for p in map.free_cells() {
            let g = link_geometry(&map, &tx, p, c.h_ut);
            if g.los && g.d_2d > 20.0 {
                let want = c.p_tx_dbm - loss(pathloss_umi(&g, &c).unwrap());
                assert!((grid.get(p.x, p.y) as f64 - want).abs() < 1e-4);
                checked += 1;
            }
        }
        assert!(checked > 10);
    }
}
