//! Core value types: location types, geotagged messages, site records, and
//! great-circle distance. Everything here is immutable after construction and
//! safe to share across workers.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean Earth radius in meters used by all distance computations. Recorded
/// in reports for reproducibility.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default local-time offset from UTC, in seconds (-5 h: the reference
/// corpus is Manhattan). Day-period features and the temporal analysis apply
/// this offset; it is configurable and echoed in every report.
pub const DEFAULT_TZ_OFFSET_SECS: i64 = -5 * 3600;

/// One label from the type catalog.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationType {
    /// Dense index in the owning catalog, `0..C`.
    pub index: usize,
    /// Text label, e.g. `"school"`.
    pub name: String,
}

/// Ordered set of location types. Order is fixed at construction and
/// persisted with every model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCatalog {
    types: Vec<LocationType>,
}

impl TypeCatalog {
    /// Builds a catalog from unique names. Requires at least two classes.
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "catalog needs at least 2 types, got {}",
                names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut types = Vec::with_capacity(names.len());
        for (index, name) in names.iter().enumerate() {
            let name = name.as_ref().to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate type name: {name}")));
            }
            types.push(LocationType { index, name });
        }
        Ok(TypeCatalog { types })
    }

    /// The six default location types.
    pub fn default_six() -> Self {
        TypeCatalog::new(&["school", "university", "church", "shop", "museum", "health"])
            .expect("default catalog is valid")
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&LocationType> {
        self.types.get(index)
    }

    pub fn by_name(&self, name: &str) -> Option<&LocationType> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LocationType> {
        self.types.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.types.iter().map(|t| t.name.as_str()).collect()
    }
}

/// A validated WGS-84 point in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || lat.is_nan() {
            return Err(Error::InvalidCoordinate { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// Great-circle distance in meters between two points, on a sphere of radius
/// [`EARTH_RADIUS_M`]. Symmetric and non-negative.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

/// One geotagged post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeotaggedMessage {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// UTC epoch seconds.
    pub ts: i64,
    pub text: String,
    /// Optional POS tags aligned to the canonical tokenization of `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
}

impl GeotaggedMessage {
    /// Validates coordinate bounds. POS/token alignment is checked at
    /// ingestion, where the canonical tokenizer is applied.
    pub fn new(
        id: impl Into<String>,
        lat: f64,
        lon: f64,
        ts: i64,
        text: impl Into<String>,
        pos: Option<Vec<String>>,
    ) -> Result<Self> {
        GeoPoint::new(lat, lon)?;
        Ok(GeotaggedMessage {
            id: id.into(),
            lat,
            lon,
            ts,
            text: text.into(),
            pos,
        })
    }

    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

/// A labeled or unlabeled entity with its associated message set.
///
/// Messages are kept sorted ascending by `(ts, id)` so that re-ingesting the
/// same files yields byte-identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Ground-truth type, present for training corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<LocationType>,
    /// `(message, distance to the entity point in meters)` pairs.
    pub messages: Vec<(GeotaggedMessage, f64)>,
}

impl SiteRecord {
    pub fn new(
        id: impl Into<String>,
        lat: f64,
        lon: f64,
        truth: Option<LocationType>,
        mut messages: Vec<(GeotaggedMessage, f64)>,
    ) -> Result<Self> {
        GeoPoint::new(lat, lon)?;
        sort_messages(&mut messages);
        Ok(SiteRecord {
            id: id.into(),
            lat,
            lon,
            truth,
            messages,
        })
    }

    pub fn point(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }

    /// Index of the true class, if labeled.
    pub fn truth_index(&self) -> Option<usize> {
        self.truth.as_ref().map(|t| t.index)
    }
}

/// Canonical message order within a record: ascending `(ts, id)`.
pub(crate) fn sort_messages(messages: &mut [(GeotaggedMessage, f64)]) {
    messages.sort_by(|(a, _), (b, _)| a.ts.cmp(&b.ts).then_with(|| a.id.cmp(&b.id)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Independent oracle: spherical law of cosines on the same radius.
    fn law_of_cosines_m(a: GeoPoint, b: GeoPoint) -> f64 {
        let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
        let dlon = (b.lon - a.lon).to_radians();
        let c = (lat1.sin() * lat2.sin() + lat1.cos() * lat2.cos() * dlon.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn haversine_identical_points_is_zero() {
        let a = p(40.7580, -73.9855);
        assert_eq!(haversine_m(a, a), 0.0);
    }

    #[test]
    fn haversine_one_degree_meridian_arc() {
        // Same longitude: distance reduces to R * dф in closed form.
        let d = haversine_m(p(10.0, 20.0), p(11.0, 20.0));
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((d - expected).abs() < 0.1, "got {d}, want {expected}");
        assert!((d - 111_194.9).abs() < 0.5);
    }

    #[test]
    fn haversine_matches_law_of_cosines_oracle() {
        let a = p(40.7580, -73.9855);
        let b = p(40.7614, -73.9776);
        let d = haversine_m(a, b);
        let oracle = law_of_cosines_m(a, b);
        assert!((d - oracle).abs() / oracle < 0.005, "{d} vs {oracle}");
    }

    #[test]
    fn invalid_coordinates_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(-90.5, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.5).is_err());
        assert!(GeoPoint::new(90.0, -180.0).is_ok());
    }

    #[test]
    fn catalog_rejects_duplicates_and_singletons() {
        assert!(TypeCatalog::new(&["a"]).is_err());
        assert!(TypeCatalog::new(&["a", "a"]).is_err());
        let cat = TypeCatalog::default_six();
        assert_eq!(cat.len(), 6);
        assert_eq!(cat.by_name("museum").unwrap().index, 4);
        assert_eq!(cat.get(0).unwrap().name, "school");
    }

    #[test]
    fn record_sorts_messages_by_ts_then_id() {
        let m = |id: &str, ts: i64| {
            GeotaggedMessage::new(id, 0.0, 0.0, ts, "x", None).unwrap()
        };
        let rec = SiteRecord::new(
            "e",
            0.0,
            0.0,
            None,
            vec![(m("b", 5), 1.0), (m("a", 5), 2.0), (m("z", 1), 3.0)],
        )
        .unwrap();
        let ids: Vec<&str> = rec.messages.iter().map(|(m, _)| m.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "b"]);
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_nonnegative(
            lat1 in -90.0f64..90.0, lon1 in -180.0f64..180.0,
            lat2 in -90.0f64..90.0, lon2 in -180.0f64..180.0,
        ) {
            let a = p(lat1, lon1);
            let b = p(lat2, lon2);
            let ab = haversine_m(a, b);
            let ba = haversine_m(b, a);
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn haversine_triangle_inequality(
            lat1 in -89.0f64..89.0, lon1 in -179.0f64..179.0,
            lat2 in -89.0f64..89.0, lon2 in -179.0f64..179.0,
            lat3 in -89.0f64..89.0, lon3 in -179.0f64..179.0,
        ) {
            let (a, b, c) = (p(lat1, lon1), p(lat2, lon2), p(lat3, lon3));
            let direct = haversine_m(a, c);
            let via = haversine_m(a, b) + haversine_m(b, c);
            prop_assert!(direct <= via * (1.0 + 1e-6) + 1e-6);
        }
    }
}
