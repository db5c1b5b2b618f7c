//! CSV datasets: one interleaved sensor stream file and an optional truth file.
//!
//! Stream columns are `time_s,kind,sensor_id,d0..d8`. IMU rows (`kind = imu`)
//! carry specific force and angular rate in `d0..d5`; odometry rows
//! (`kind = odom`) carry position, the vector part of the orientation
//! quaternion and velocity. The scalar part is rebuilt as the non-negative
//! root, so writers must store quaternions with `w >= 0`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::eskf::{canonical_quaternion, ImuSample, NominalState, OdometrySample, SensorEvent};
use crate::sim::Trajectory;
use crate::{Error, Result, SensorId};

pub const STREAM_HEADER: [&str; 12] = [
    "time_s",
    "kind",
    "sensor_id",
    "d0",
    "d1",
    "d2",
    "d3",
    "d4",
    "d5",
    "d6",
    "d7",
    "d8",
];
pub const TRUTH_HEADER: [&str; 10] = [
    "time_s", "px", "py", "pz", "qx", "qy", "qz", "vx", "vy", "vz",
];
/// Rows may step back in time by at most this much (seconds).
pub const TIME_TOLERANCE: f64 = 1e-3;
/// Largest accepted `|q_xyz|² - 1` before a row is rejected.
const QUATERNION_SLACK: f64 = 1e-9;

const IMU_ID: &str = "imu";

pub fn write_stream<W: Write>(out: W, events: &[SensorEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STREAM_HEADER).map_err(csv_io)?;
    for e in events {
        let mut row: Vec<String> = Vec::with_capacity(12);
        match e {
            SensorEvent::Imu(s) => {
                row.push(s.time.to_string());
                row.push("imu".into());
                row.push(IMU_ID.into());
                row.extend(s.specific_force.iter().map(f64::to_string));
                row.extend(s.angular_rate.iter().map(f64::to_string));
                row.extend(std::iter::repeat_n(String::new(), 3));
            }
            SensorEvent::Odometry(s) => {
                let q = canonical_quaternion(&s.orientation);
                row.push(s.time.to_string());
                row.push("odom".into());
                row.push(s.sensor.to_string());
                row.extend(s.position.iter().map(f64::to_string));
                row.extend(q.imag().iter().map(f64::to_string));
                row.extend(s.velocity.iter().map(f64::to_string));
            }
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stream_file(path: &Path, events: &[SensorEvent]) -> Result<()> {
    write_stream(File::create(path)?, events)
}

pub fn write_truth<'a, W: Write>(
    out: W,
    states: impl IntoIterator<Item = &'a NominalState>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER).map_err(csv_io)?;
    for x in states {
        let q = canonical_quaternion(&x.orientation);
        let row: Vec<String> = std::iter::once(x.time)
            .chain(x.position.iter().copied())
            .chain(q.imag().iter().copied())
            .chain(x.velocity.iter().copied())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_file(path: &Path, truth: &Trajectory) -> Result<()> {
    write_truth(File::create(path)?, truth.states())
}

/// Parse a stream. `sensors` lists the odometry ids that may appear; an
/// empty list accepts any id. Line numbers in errors count the header as 1.
pub fn read_stream<R: Read>(input: R, sensors: &[SensorId]) -> Result<Vec<SensorEvent>> {
    let known: BTreeSet<&str> = sensors.iter().map(SensorId::as_str).collect();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();

    let header = match records.next() {
        None => {
            log::warn!("dataset is empty, producing an empty stream");
            return Ok(Vec::new());
        }
        Some(h) => h.map_err(|e| csv_error(1, e))?,
    };
    if header.iter().ne(STREAM_HEADER.iter().copied()) {
        return Err(Error::dataset(
            1,
            format!("expected header `{}`", STREAM_HEADER.join(",")),
        ));
    }

    let mut events: Vec<(f64, usize, SensorEvent)> = Vec::new();
    let mut latest: Option<(f64, usize)> = None;
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(line, e))?;
        let event = parse_stream_row(&rec, line, &known)?;
        let t = event.time();
        if let Some((prev, prev_line)) = latest {
            if t < prev - TIME_TOLERANCE {
                return Err(Error::dataset(
                    line,
                    format!(
                        "timestamp {t} goes back in time from {prev} at line {prev_line} \
                         (tolerance {TIME_TOLERANCE} s)"
                    ),
                ));
            }
        }
        if latest.is_none_or(|(prev, _)| t >= prev) {
            latest = Some((t, line));
        }
        events.push((t, line, event));
    }
    // jitter inside the tolerance is reordered; ties keep file order
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(events.into_iter().map(|(_, _, e)| e).collect())
}

pub fn read_stream_file(path: &Path, sensors: &[SensorId]) -> Result<Vec<SensorEvent>> {
    read_stream(File::open(path)?, sensors)
}

/// Distinct odometry sensor ids in order of first appearance.
pub fn sensor_ids(events: &[SensorEvent]) -> Vec<SensorId> {
    let mut ids: Vec<SensorId> = Vec::new();
    for e in events {
        if let SensorEvent::Odometry(o) = e {
            if !ids.contains(&o.sensor) {
                ids.push(o.sensor.clone());
            }
        }
    }
    ids
}

pub fn read_truth<R: Read>(input: R) -> Result<Vec<NominalState>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(h) => h.map_err(|e| csv_error(1, e))?,
    };
    if header.iter().ne(TRUTH_HEADER.iter().copied()) {
        return Err(Error::dataset(
            1,
            format!("expected header `{}`", TRUTH_HEADER.join(",")),
        ));
    }
    let mut out: Vec<NominalState> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_error(line, e))?;
        let v: Vec<f64> = (0..10)
            .map(|c| number(&rec, c, line))
            .collect::<Result<_>>()?;
        if let Some(prev) = out.last() {
            if v[0] <= prev.time {
                return Err(Error::dataset(line, "truth timestamps must be increasing"));
            }
        }
        out.push(NominalState {
            time: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: quaternion_from_vector_part(v[4], v[5], v[6], line)?,
            velocity: Vector3::new(v[7], v[8], v[9]),
        });
    }
    Ok(out)
}

pub fn read_truth_file(path: &Path) -> Result<Vec<NominalState>> {
    read_truth(File::open(path)?)
}

fn parse_stream_row(
    rec: &csv::StringRecord,
    line: usize,
    known: &BTreeSet<&str>,
) -> Result<SensorEvent> {
    if rec.len() != STREAM_HEADER.len() {
        return Err(Error::dataset(
            line,
            format!(
                "expected {} columns, found {}",
                STREAM_HEADER.len(),
                rec.len()
            ),
        ));
    }
    let time = number(rec, 0, line)?;
    let sensor = &rec[2];
    match &rec[1] {
        "imu" => {
            let d: Vec<f64> = (3..9)
                .map(|c| number(rec, c, line))
                .collect::<Result<_>>()?;
            Ok(SensorEvent::Imu(ImuSample {
                time,
                specific_force: Vector3::new(d[0], d[1], d[2]),
                angular_rate: Vector3::new(d[3], d[4], d[5]),
            }))
        }
        "odom" => {
            if !known.is_empty() && !known.contains(sensor) {
                return Err(Error::dataset(
                    line,
                    format!("unknown sensor id `{sensor}`"),
                ));
            }
            let d: Vec<f64> = (3..12)
                .map(|c| number(rec, c, line))
                .collect::<Result<_>>()?;
            Ok(SensorEvent::Odometry(OdometrySample {
                time,
                sensor: SensorId::new(sensor),
                position: Vector3::new(d[0], d[1], d[2]),
                orientation: quaternion_from_vector_part(d[3], d[4], d[5], line)?,
                velocity: Vector3::new(d[6], d[7], d[8]),
            }))
        }
        other => Err(Error::dataset(
            line,
            format!("unknown row kind `{other}`, expected imu or odom"),
        )),
    }
}

fn quaternion_from_vector_part(x: f64, y: f64, z: f64, line: usize) -> Result<UnitQuaternion<f64>> {
    let n2 = x * x + y * y + z * z;
    if n2 > 1.0 + QUATERNION_SLACK {
        return Err(Error::dataset(
            line,
            format!("quaternion vector part has norm {} > 1", n2.sqrt()),
        ));
    }
    let w = (1.0 - n2).max(0.0).sqrt();
    Ok(UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)))
}

fn number(rec: &csv::StringRecord, col: usize, line: usize) -> Result<f64> {
    let raw = rec.get(col).unwrap_or("");
    let v: f64 = raw
        .parse()
        .map_err(|_| Error::dataset(line, format!("column {col} (`{raw}`) is not a number")))?;
    if !v.is_finite() {
        return Err(Error::dataset(line, format!("column {col} is not finite")));
    }
    Ok(v)
}

fn csv_error(line: usize, e: csv::Error) -> Error {
    Error::dataset(line, e.to_string())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
