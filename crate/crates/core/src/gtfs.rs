//! Static GTFS feed loading and the trip lookups the agent tools use.
//!
//! Only the five tables needed for direct-trip queries are read:
//! `stops.txt`, `routes.txt`, `trips.txt`, `stop_times.txt` and
//! `calendar.txt`. Unknown columns are ignored. A loaded [`GtfsFeed`] is
//! immutable and can be shared across threads.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textmatch::normalize;
use crate::time::{format_hhmm, parse_gtfs_time, ServiceSeconds};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GtfsError {
    #[error("missing feed file {0}")]
    MissingFile(String),
    #[error("{file}:{line}: {reason}")]
    MalformedRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("{entity} {id} is referenced but not defined")]
    DanglingReference { entity: String, id: String },
    #[error("trip {0} has fewer than two stop times")]
    EmptyTrip(String),
    #[error("unknown trip {0}")]
    UnknownTrip(String),
    #[error("unknown stop {0}")]
    UnknownStop(String),
    #[error("origin and destination are the same stop")]
    SameStop,
    #[error("io error reading {file}: {reason}")]
    Io { file: String, reason: String },
}

/// GTFS tri-state accessibility flag (`0`/empty, `1`, `2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accessibility {
    #[default]
    Unknown,
    Accessible,
    NotAccessible,
}

impl Accessibility {
    fn from_field(raw: &str) -> Option<Self> {
        match raw.trim() {
            "" | "0" => Some(Self::Unknown),
            "1" => Some(Self::Accessible),
            "2" => Some(Self::NotAccessible),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stop {
    pub stop_id: String,
    pub name: String,
    pub wheelchair_boarding: Accessibility,
}

impl Stop {
    /// The name without a trailing "GO" / "Station", e.g. "Union" for
    /// "Union Station". `None` when nothing would remain.
    pub fn short_name(&self) -> Option<String> {
        let mut words: Vec<String> = crate::textmatch::tokens(&self.name).collect();
        while words
            .last()
            .is_some_and(|w| matches!(w.as_str(), "go" | "station" | "stn"))
        {
            words.pop();
        }
        (!words.is_empty() && words.join(" ") != normalize(&self.name)).then(|| words.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub route_id: String,
    pub long_name: String,
    pub short_name: Option<String>,
}

impl Route {
    /// Hashtag form of the line name: `#LakeshoreEast`.
    pub fn hashtag(&self) -> String {
        let compact: String = self
            .long_name
            .split_whitespace()
            .flat_map(|w| w.chars().filter(|c| c.is_alphanumeric()))
            .collect();
        format!("#{compact}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trip {
    pub trip_id: String,
    pub route_id: String,
    pub service_id: String,
    pub headsign: Option<String>,
    pub wheelchair_accessible: Accessibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopTime {
    pub trip_id: String,
    pub stop_id: String,
    pub arrival: ServiceSeconds,
    pub departure: ServiceSeconds,
    pub sequence: u32,
}

/// Operating days of one `service_id`. Dates are `YYYYMMDD` integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceCalendar {
    /// Monday first.
    pub weekdays: [bool; 7],
    pub start_date: u32,
    pub end_date: u32,
}

impl ServiceCalendar {
    /// `weekday` counts from Monday = 0.
    pub fn runs_on(&self, date: u32, weekday: usize) -> bool {
        weekday < 7 && self.weekdays[weekday] && (self.start_date..=self.end_date).contains(&date)
    }
}

/// One stop visited by a trip, with its times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCall {
    pub stop_id: String,
    pub stop_name: String,
    pub arrival: ServiceSeconds,
    pub departure: ServiceSeconds,
}

/// A trip between two of its stops, ready to be shown to a person or a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripDetails {
    pub trip_id: String,
    pub route_id: String,
    pub route_name: String,
    pub headsign: Option<String>,
    pub origin: StopCall,
    pub destination: StopCall,
    pub intermediate: Vec<StopCall>,
    pub wheelchair_accessible: Accessibility,
}

impl TripDetails {
    /// Departure time at the origin.
    pub fn departure(&self) -> ServiceSeconds {
        self.origin.departure
    }

    /// Arrival time at the destination.
    pub fn arrival(&self) -> ServiceSeconds {
        self.destination.arrival
    }

    /// Number of stops from origin to destination inclusive.
    pub fn stop_count(&self) -> usize {
        self.intermediate.len() + 2
    }

    pub fn stop_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.origin.stop_id.as_str())
            .chain(self.intermediate.iter().map(|s| s.stop_id.as_str()))
            .chain(std::iter::once(self.destination.stop_id.as_str()))
    }
}

impl fmt::Display for TripDetails {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Trip {} ({} line): departs {} at {}, arrives {} at {}",
            self.trip_id,
            self.route_name,
            self.origin.stop_name,
            format_hhmm(self.departure()),
            self.destination.stop_name,
            format_hhmm(self.arrival()),
        )?;
        if !self.intermediate.is_empty() {
            let stops: Vec<String> = self
                .intermediate
                .iter()
                .map(|s| format!("{} {}", s.stop_name, format_hhmm(s.departure)))
                .collect();
            write!(f, "; stops at {}", stops.join(", "))?;
        }
        let access = match self.wheelchair_accessible {
            Accessibility::Accessible => "wheelchair accessible",
            Accessibility::NotAccessible => "not wheelchair accessible",
            Accessibility::Unknown => "accessibility unknown",
        };
        write!(f, "; {access}")
    }
}

/// Why a stop name could not be resolved.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StopLookupError {
    #[error("no stop matches {0:?}")]
    Unknown(String),
    #[error("{name:?} matches several stops: {}", candidates.join(", "))]
    Ambiguous {
        name: String,
        candidates: Vec<String>,
    },
}

/// Indexed, immutable GTFS feed.
#[derive(Debug, Clone)]
pub struct GtfsFeed {
    stops: BTreeMap<String, Stop>,
    routes: BTreeMap<String, Route>,
    trips: BTreeMap<String, Trip>,
    calendar: BTreeMap<String, ServiceCalendar>,
    /// trip_id -> stop times ordered by sequence.
    trip_stop_times: HashMap<String, Vec<StopTime>>,
    /// (origin, destination) -> (trip_id, origin index, destination index).
    od_index: HashMap<(String, String), Vec<(String, usize, usize)>>,
}

struct Table {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(dir: &Path, file: &str, required: &[&str]) -> Result<Self, GtfsError> {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(GtfsError::MissingFile(file.to_string()));
        }
        let malformed = |line: u64, reason: String| GtfsError::MalformedRow {
            file: file.to_string(),
            line,
            reason,
        };
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(&path)
            .map_err(|e| GtfsError::Io {
                file: file.to_string(),
                reason: e.to_string(),
            })?;
        let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?;
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        for col in required {
            if !columns.contains_key(*col) {
                return Err(malformed(1, format!("missing column {col}")));
            }
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                malformed(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            if record.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            rows.push((line, record));
        }
        Ok(Self {
            file: file.to_string(),
            columns,
            rows,
        })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, column: &str) -> &'r str {
        self.columns
            .get(column)
            .and_then(|&i| record.get(i))
            .map_or("", str::trim)
    }

    fn required<'r>(
        &self,
        line: u64,
        record: &'r csv::StringRecord,
        column: &str,
    ) -> Result<&'r str, GtfsError> {
        let value = self.get(record, column);
        if value.is_empty() {
            return Err(self.malformed(line, format!("empty {column}")));
        }
        Ok(value)
    }

    fn malformed(&self, line: u64, reason: String) -> GtfsError {
        GtfsError::MalformedRow {
            file: self.file.clone(),
            line,
            reason,
        }
    }
}

fn dangling(entity: &str, id: &str) -> GtfsError {
    GtfsError::DanglingReference {
        entity: entity.to_string(),
        id: id.to_string(),
    }
}

impl GtfsFeed {
    /// Loads and indexes the feed in `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, GtfsError> {
        let dir = dir.as_ref();
        // Check presence of every file before parsing any of them.
        for file in [
            "stops.txt",
            "routes.txt",
            "trips.txt",
            "stop_times.txt",
            "calendar.txt",
        ] {
            if !dir.join(file).is_file() {
                return Err(GtfsError::MissingFile(file.to_string()));
            }
        }

        let stops = Self::load_stops(dir)?;
        let routes = Self::load_routes(dir)?;
        let calendar = Self::load_calendar(dir)?;
        let trips = Self::load_trips(dir, &routes, &calendar)?;
        let trip_stop_times = Self::load_stop_times(dir, &stops, &trips)?;

        let mut od_index: HashMap<(String, String), Vec<(String, usize, usize)>> = HashMap::new();
        for (trip_id, times) in &trip_stop_times {
            for (i, from) in times.iter().enumerate() {
                for (j, to) in times.iter().enumerate().skip(i + 1) {
                    if from.stop_id == to.stop_id {
                        continue;
                    }
                    let entry = od_index
                        .entry((from.stop_id.clone(), to.stop_id.clone()))
                        .or_default();
                    if !entry.iter().any(|(t, _, _)| t == trip_id) {
                        entry.push((trip_id.clone(), i, j));
                    }
                }
            }
        }

        Ok(Self {
            stops,
            routes,
            trips,
            calendar,
            trip_stop_times,
            od_index,
        })
    }

    fn load_stops(dir: &Path) -> Result<BTreeMap<String, Stop>, GtfsError> {
        let table = Table::read(dir, "stops.txt", &["stop_id", "stop_name"])?;
        let mut stops = BTreeMap::new();
        for (line, rec) in &table.rows {
            let stop_id = table.required(*line, rec, "stop_id")?.to_string();
            let name = table.required(*line, rec, "stop_name")?.to_string();
            let wheelchair_boarding =
                Accessibility::from_field(table.get(rec, "wheelchair_boarding"))
                    .ok_or_else(|| table.malformed(*line, "bad wheelchair_boarding".into()))?;
            if stops.contains_key(&stop_id) {
                return Err(table.malformed(*line, format!("duplicate stop_id {stop_id}")));
            }
            stops.insert(
                stop_id.clone(),
                Stop {
                    stop_id,
                    name,
                    wheelchair_boarding,
                },
            );
        }
        Ok(stops)
    }

    fn load_routes(dir: &Path) -> Result<BTreeMap<String, Route>, GtfsError> {
        let table = Table::read(dir, "routes.txt", &["route_id"])?;
        let mut routes = BTreeMap::new();
        for (line, rec) in &table.rows {
            let route_id = table.required(*line, rec, "route_id")?.to_string();
            let short = table.get(rec, "route_short_name");
            let long = table.get(rec, "route_long_name");
            let long_name = match (long.is_empty(), short.is_empty()) {
                (false, _) => long.to_string(),
                (true, false) => short.to_string(),
                (true, true) => {
                    return Err(table.malformed(*line, "route has no name".into()));
                }
            };
            if routes.contains_key(&route_id) {
                return Err(table.malformed(*line, format!("duplicate route_id {route_id}")));
            }
            routes.insert(
                route_id.clone(),
                Route {
                    route_id,
                    long_name,
                    short_name: (!short.is_empty()).then(|| short.to_string()),
                },
            );
        }
        Ok(routes)
    }

    fn load_calendar(dir: &Path) -> Result<BTreeMap<String, ServiceCalendar>, GtfsError> {
        const DAYS: [&str; 7] = [
            "monday",
            "tuesday",
            "wednesday",
            "thursday",
            "friday",
            "saturday",
            "sunday",
        ];
        let mut required = vec!["service_id", "start_date", "end_date"];
        required.extend(DAYS);
        let table = Table::read(dir, "calendar.txt", &required)?;
        let mut calendar = BTreeMap::new();
        for (line, rec) in &table.rows {
            let service_id = table.required(*line, rec, "service_id")?.to_string();
            let mut weekdays = [false; 7];
            for (slot, day) in weekdays.iter_mut().zip(DAYS) {
                *slot = match table.get(rec, day) {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(table.malformed(*line, format!("bad {day} value {other:?}")))
                    }
                };
            }
            let date = |col: &str| -> Result<u32, GtfsError> {
                let raw = table.required(*line, rec, col)?;
                raw.parse::<u32>()
                    .ok()
                    .filter(|_| raw.len() == 8)
                    .ok_or_else(|| table.malformed(*line, format!("bad {col} {raw:?}")))
            };
            let start_date = date("start_date")?;
            let end_date = date("end_date")?;
            calendar.insert(
                service_id,
                ServiceCalendar {
                    weekdays,
                    start_date,
                    end_date,
                },
            );
        }
        Ok(calendar)
    }

    fn load_trips(
        dir: &Path,
        routes: &BTreeMap<String, Route>,
        calendar: &BTreeMap<String, ServiceCalendar>,
    ) -> Result<BTreeMap<String, Trip>, GtfsError> {
        let table = Table::read(dir, "trips.txt", &["route_id", "service_id", "trip_id"])?;
        let mut trips = BTreeMap::new();
        for (line, rec) in &table.rows {
            let trip_id = table.required(*line, rec, "trip_id")?.to_string();
            let route_id = table.required(*line, rec, "route_id")?.to_string();
            let service_id = table.required(*line, rec, "service_id")?.to_string();
            if !routes.contains_key(&route_id) {
                return Err(dangling("route", &route_id));
            }
            if !calendar.contains_key(&service_id) {
                return Err(dangling("service", &service_id));
            }
            let headsign = table.get(rec, "trip_headsign");
            let wheelchair_accessible =
                Accessibility::from_field(table.get(rec, "wheelchair_accessible"))
                    .ok_or_else(|| table.malformed(*line, "bad wheelchair_accessible".into()))?;
            if trips.contains_key(&trip_id) {
                return Err(table.malformed(*line, format!("duplicate trip_id {trip_id}")));
            }
            trips.insert(
                trip_id.clone(),
                Trip {
                    trip_id,
                    route_id,
                    service_id,
                    headsign: (!headsign.is_empty()).then(|| headsign.to_string()),
                    wheelchair_accessible,
                },
            );
        }
        Ok(trips)
    }

    fn load_stop_times(
        dir: &Path,
        stops: &BTreeMap<String, Stop>,
        trips: &BTreeMap<String, Trip>,
    ) -> Result<HashMap<String, Vec<StopTime>>, GtfsError> {
        let table = Table::read(
            dir,
            "stop_times.txt",
            &[
                "trip_id",
                "arrival_time",
                "departure_time",
                "stop_id",
                "stop_sequence",
            ],
        )?;
        let mut by_trip: HashMap<String, Vec<(u64, StopTime)>> = HashMap::new();
        for (line, rec) in &table.rows {
            let trip_id = table.required(*line, rec, "trip_id")?.to_string();
            let stop_id = table.required(*line, rec, "stop_id")?.to_string();
            let time = |col: &str| -> Result<ServiceSeconds, GtfsError> {
                let raw = table.required(*line, rec, col)?;
                parse_gtfs_time(raw)
                    .ok_or_else(|| table.malformed(*line, format!("bad {col} {raw:?}")))
            };
            let arrival = time("arrival_time")?;
            let departure = time("departure_time")?;
            let raw_seq = table.required(*line, rec, "stop_sequence")?;
            let sequence: u32 = raw_seq
                .parse()
                .map_err(|_| table.malformed(*line, format!("bad stop_sequence {raw_seq:?}")))?;
            if !trips.contains_key(&trip_id) {
                return Err(dangling("trip", &trip_id));
            }
            if !stops.contains_key(&stop_id) {
                return Err(dangling("stop", &stop_id));
            }
            if departure < arrival {
                return Err(table.malformed(*line, "departure before arrival".into()));
            }
            by_trip.entry(trip_id.clone()).or_default().push((
                *line,
                StopTime {
                    trip_id,
                    stop_id,
                    arrival,
                    departure,
                    sequence,
                },
            ));
        }

        let mut out = HashMap::with_capacity(by_trip.len());
        for trip_id in trips.keys() {
            let Some(mut rows) = by_trip.remove(trip_id) else {
                return Err(GtfsError::EmptyTrip(trip_id.clone()));
            };
            if rows.len() < 2 {
                return Err(GtfsError::EmptyTrip(trip_id.clone()));
            }
            rows.sort_by_key(|(_, st)| st.sequence);
            for pair in rows.windows(2) {
                let (_, prev) = &pair[0];
                let (line, next) = &pair[1];
                if next.sequence == prev.sequence {
                    return Err(table.malformed(*line, "duplicate stop_sequence".into()));
                }
                if next.arrival < prev.arrival {
                    return Err(table.malformed(*line, "arrival earlier than previous stop".into()));
                }
            }
            out.insert(
                trip_id.clone(),
                rows.into_iter().map(|(_, st)| st).collect(),
            );
        }
        Ok(out)
    }

    pub fn stops(&self) -> impl Iterator<Item = &Stop> {
        self.stops.values()
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.routes.values()
    }

    pub fn trips(&self) -> impl Iterator<Item = &Trip> {
        self.trips.values()
    }

    pub fn stop(&self, stop_id: &str) -> Option<&Stop> {
        self.stops.get(stop_id)
    }

    pub fn route(&self, route_id: &str) -> Option<&Route> {
        self.routes.get(route_id)
    }

    pub fn trip(&self, trip_id: &str) -> Option<&Trip> {
        self.trips.get(trip_id)
    }

    pub fn service(&self, service_id: &str) -> Option<&ServiceCalendar> {
        self.calendar.get(service_id)
    }

    /// Stop times of a trip, ordered by sequence.
    pub fn stop_times(&self, trip_id: &str) -> Option<&[StopTime]> {
        self.trip_stop_times.get(trip_id).map(Vec::as_slice)
    }

    pub fn stop_time_count(&self) -> usize {
        self.trip_stop_times.values().map(Vec::len).sum()
    }

    fn call(&self, st: &StopTime) -> StopCall {
        StopCall {
            stop_id: st.stop_id.clone(),
            stop_name: self.stops[&st.stop_id].name.clone(),
            arrival: st.arrival,
            departure: st.departure,
        }
    }

    fn segment(&self, trip_id: &str, from: usize, to: usize) -> TripDetails {
        let trip = &self.trips[trip_id];
        let times = &self.trip_stop_times[trip_id];
        let route = &self.routes[&trip.route_id];
        TripDetails {
            trip_id: trip.trip_id.clone(),
            route_id: trip.route_id.clone(),
            route_name: route.long_name.clone(),
            headsign: trip.headsign.clone(),
            origin: self.call(&times[from]),
            destination: self.call(&times[to]),
            intermediate: times[from + 1..to].iter().map(|st| self.call(st)).collect(),
            wheelchair_accessible: trip.wheelchair_accessible,
        }
    }

    /// Full-length details of a trip, first stop to last.
    pub fn trip_details(&self, trip_id: &str) -> Result<TripDetails, GtfsError> {
        let times = self
            .trip_stop_times
            .get(trip_id)
            .ok_or_else(|| GtfsError::UnknownTrip(trip_id.to_string()))?;
        Ok(self.segment(trip_id, 0, times.len() - 1))
    }

    /// Direct trips from `origin` to `destination` leaving at or after
    /// `after`, earliest first, ties by trip id. At most `limit` results.
    pub fn next_departures(
        &self,
        origin: &str,
        destination: &str,
        after: ServiceSeconds,
        limit: usize,
    ) -> Result<Vec<TripDetails>, GtfsError> {
        for stop in [origin, destination] {
            if !self.stops.contains_key(stop) {
                return Err(GtfsError::UnknownStop(stop.to_string()));
            }
        }
        if origin == destination {
            return Err(GtfsError::SameStop);
        }
        let Some(candidates) = self
            .od_index
            .get(&(origin.to_string(), destination.to_string()))
        else {
            return Ok(Vec::new());
        };
        let mut hits: Vec<(ServiceSeconds, &str, usize, usize)> = candidates
            .iter()
            .filter_map(|(trip_id, from, to)| {
                let dep = self.trip_stop_times[trip_id][*from].departure;
                (dep >= after).then_some((dep, trip_id.as_str(), *from, *to))
            })
            .collect();
        hits.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        Ok(hits
            .into_iter()
            .take(limit)
            .map(|(_, trip_id, from, to)| self.segment(trip_id, from, to))
            .collect())
    }

    /// Resolves a rider-supplied stop name: exact stop id, then
    /// case-insensitive full name, then short name ("Union"), then an
    /// unambiguous name prefix.
    pub fn resolve_stop(&self, name: &str) -> Result<&Stop, StopLookupError> {
        if let Some(stop) = self.stops.get(name.trim()) {
            return Ok(stop);
        }
        let wanted = normalize(name);
        if wanted.is_empty() {
            return Err(StopLookupError::Unknown(name.to_string()));
        }
        fn pick<'a>(name: &str, matches: Vec<&'a Stop>) -> Option<Result<&'a Stop, StopLookupError>> {
            match matches.len() {
                0 => None,
                1 => Some(Ok(matches[0])),
                _ => Some(Err(StopLookupError::Ambiguous {
                    name: name.to_string(),
                    candidates: matches.iter().map(|s| s.name.clone()).collect(),
                })),
            }
        }
        let exact = self
            .stops
            .values()
            .filter(|s| normalize(&s.name) == wanted)
            .collect();
        if let Some(found) = pick(name, exact) {
            return found;
        }
        let short = self
            .stops
            .values()
            .filter(|s| s.short_name().is_some_and(|n| n == wanted))
            .collect();
        if let Some(found) = pick(name, short) {
            return found;
        }
        let prefix = self
            .stops
            .values()
            .filter(|s| normalize(&s.name).starts_with(&wanted))
            .collect();
        pick(name, prefix).unwrap_or_else(|| Err(StopLookupError::Unknown(name.to_string())))
    }
}
