//! Transverse Mercator on WGS-84 using Krüger's series to sixth order in the
//! third flattening, with UTM constants (k0 = 0.9996, false easting 500 km,
//! false northing 10 000 km in the southern hemisphere).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcio::UtmZone;

const A: f64 = 6_378_137.0;
const F: f64 = 1.0 / 298.257_223_563;
const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

/// WGS-84 latitude/longitude in degrees plus ellipsoidal height in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticCoord {
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
}

struct Series {
    e: f64,
    /// Rectifying radius times k0.
    scale: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn series() -> Series {
    let n = F / (2.0 - F);
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let n5 = n4 * n;
    let n6 = n5 * n;
    let rectifying = A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 / 3.0 * n2 + 5.0 / 16.0 * n3 + 41.0 / 180.0 * n4 - 127.0 / 288.0 * n5
            + 7891.0 / 37800.0 * n6,
        13.0 / 48.0 * n2 - 3.0 / 5.0 * n3 + 557.0 / 1440.0 * n4 + 281.0 / 630.0 * n5
            - 1983433.0 / 1935360.0 * n6,
        61.0 / 240.0 * n3 - 103.0 / 140.0 * n4 + 15061.0 / 26880.0 * n5 + 167603.0 / 181440.0 * n6,
        49561.0 / 161280.0 * n4 - 179.0 / 168.0 * n5 + 6601661.0 / 7257600.0 * n6,
        34729.0 / 80640.0 * n5 - 3418889.0 / 1995840.0 * n6,
        212378941.0 / 319334400.0 * n6,
    ];
    let beta = [
        n / 2.0 - 2.0 / 3.0 * n2 + 37.0 / 96.0 * n3 - 1.0 / 360.0 * n4 - 81.0 / 512.0 * n5
            + 96199.0 / 604800.0 * n6,
        1.0 / 48.0 * n2 + 1.0 / 15.0 * n3 - 437.0 / 1440.0 * n4 + 46.0 / 105.0 * n5
            - 1118711.0 / 3870720.0 * n6,
        17.0 / 480.0 * n3 - 37.0 / 840.0 * n4 - 209.0 / 4480.0 * n5 + 5569.0 / 90720.0 * n6,
        4397.0 / 161280.0 * n4 - 11.0 / 504.0 * n5 - 830251.0 / 7257600.0 * n6,
        4583.0 / 161280.0 * n5 - 108847.0 / 3991680.0 * n6,
        20648693.0 / 638668800.0 * n6,
    ];
    Series {
        e: (F * (2.0 - F)).sqrt(),
        scale: K0 * rectifying,
        alpha,
        beta,
    }
}

/// Inverse UTM: grid coordinates to geodetic latitude/longitude.
pub fn utm_to_geodetic(easting: f64, northing: f64, zone: UtmZone) -> Result<GeodeticCoord> {
    if !(100_000.0..=900_000.0).contains(&easting) {
        return Err(Error::Domain(format!("easting {easting} outside [100000, 900000]")));
    }
    if !northing.is_finite() {
        return Err(Error::Domain("northing must be finite".into()));
    }
    let s = series();
    let false_northing = if zone.north { 0.0 } else { FALSE_NORTHING_SOUTH };
    let xi = (northing - false_northing) / s.scale;
    let eta = (easting - FALSE_EASTING) / s.scale;

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }

    let tau_p = xi_p.sin() / (eta_p.sinh().powi(2) + xi_p.cos().powi(2)).sqrt();
    let lambda = eta_p.sinh().atan2(xi_p.cos());

    // Solve tau' = f(tau) for tau = tan(phi) by Newton's method.
    let e = s.e;
    let e2m = 1.0 - e * e;
    let mut tau = tau_p;
    for _ in 0..8 {
        let sigma = (e * (e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        let tau_i = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt();
        let d = (tau_p - tau_i) / (1.0 + tau_i * tau_i).sqrt() * (1.0 + e2m * tau * tau)
            / (e2m * (1.0 + tau * tau).sqrt());
        tau += d;
        if d.abs() < 1e-15 * tau.abs().max(1.0) {
            break;
        }
    }

    Ok(GeodeticCoord {
        latitude: tau.atan().to_degrees(),
        longitude: zone.central_meridian() + lambda.to_degrees(),
        altitude: 0.0,
    })
}

/// Forward UTM: geodetic coordinates to grid (easting, northing) in `zone`.
pub fn geodetic_to_utm(coord: &GeodeticCoord, zone: UtmZone) -> Result<(f64, f64)> {
    if !(coord.latitude.abs() < 84.0) {
        return Err(Error::Domain(format!(
            "latitude {} is outside the UTM region (|lat| < 84)",
            coord.latitude
        )));
    }
    if !(coord.longitude.abs() <= 180.0) {
        return Err(Error::Domain(format!("longitude {} out of range", coord.longitude)));
    }
    let s = series();
    let phi = coord.latitude.to_radians();
    let mut dlon = coord.longitude - zone.central_meridian();
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let lambda = dlon.to_radians();

    let sin_phi = phi.sin();
    let t = (sin_phi.atanh() - s.e * (s.e * sin_phi).atanh()).sinh();
    let xi_p = t.atan2(lambda.cos());
    let eta_p = (lambda.sin() / (1.0 + t * t).sqrt()).atanh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }

    let false_northing = if zone.north { 0.0 } else { FALSE_NORTHING_SOUTH };
    Ok((FALSE_EASTING + s.scale * eta, false_northing + s.scale * xi))
}
