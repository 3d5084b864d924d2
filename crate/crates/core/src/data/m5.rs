//! M5 competition CSV ingestion.
//!
//! Reads the wide sales matrix, the calendar, and the weekly price table
//! into the shared dataset model. Prices arrive per (store, item, week);
//! they are expanded to days through the calendar, gaps are forward- then
//! backward-filled, and a companion flag channel marks the filled days.

use std::collections::HashMap;
use std::path::Path;

use csv::StringRecord;

use crate::{Error, Result};

use super::{Calendar, Channel, Dataset, SeriesRecord};

struct Header {
    index: HashMap<String, usize>,
}

impl Header {
    fn new(record: &StringRecord) -> Self {
        Self {
            index: record
                .iter()
                .enumerate()
                .map(|(i, name)| (name.to_string(), i))
                .collect(),
        }
    }

    fn col(&self, file: &str, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("{file} is missing column {name:?}")))
    }

    fn get<'a>(&self, record: &'a StringRecord, idx: usize) -> &'a str {
        record.get(idx).unwrap_or("")
    }
}

struct CalendarDay {
    week: String,
    weekday: usize,
    year_frac: f64,
    event: f64,
    snap: HashMap<String, f64>,
}

fn day_of_year(date: &str) -> f64 {
    // date is yyyy-mm-dd; a rough in-year position is all the model needs
    const CUM: [u32; 12] = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334];
    let mut parts = date.split('-').skip(1);
    let month: usize = parts.next().and_then(|m| m.parse().ok()).unwrap_or(1);
    let day: u32 = parts.next().and_then(|d| d.parse().ok()).unwrap_or(1);
    let doy = CUM[(month - 1).min(11)] + day;
    f64::from(doy - 1) / 366.0
}

fn read_calendar(path: &Path) -> Result<Vec<CalendarDay>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = Header::new(reader.headers()?);
    let date = header.col("calendar", "date")?;
    let week = header.col("calendar", "wm_yr_wk")?;
    let wday = header.col("calendar", "wday")?;
    let ev1 = header.col("calendar", "event_name_1")?;
    let ev2 = header.col("calendar", "event_name_2")?;
    let snap_cols: Vec<(String, usize)> = header
        .index
        .iter()
        .filter(|(name, _)| name.starts_with("snap_"))
        .map(|(name, &i)| (name["snap_".len()..].to_string(), i))
        .collect();
    if snap_cols.is_empty() {
        return Err(Error::Data("calendar is missing column \"snap_*\"".into()));
    }

    let mut days = Vec::new();
    for record in reader.records() {
        let r = record?;
        let wd: usize = header
            .get(&r, wday)
            .parse()
            .map_err(|_| Error::Data(format!("calendar column \"wday\" is not an integer on row {}", days.len() + 2)))?;
        let snap = snap_cols
            .iter()
            .map(|(state, i)| (state.clone(), f64::from(header.get(&r, *i) == "1")))
            .collect();
        days.push(CalendarDay {
            week: header.get(&r, week).to_string(),
            weekday: (wd.max(1) - 1) % 7,
            year_frac: day_of_year(header.get(&r, date)),
            event: f64::from(
                !header.get(&r, ev1).is_empty() || !header.get(&r, ev2).is_empty(),
            ),
            snap,
        });
    }
    Ok(days)
}

fn read_prices(path: &Path) -> Result<HashMap<(String, String), HashMap<String, f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = Header::new(reader.headers()?);
    let store = header.col("prices", "store_id")?;
    let item = header.col("prices", "item_id")?;
    let week = header.col("prices", "wm_yr_wk")?;
    let price = header.col("prices", "sell_price")?;

    let mut map: HashMap<(String, String), HashMap<String, f64>> = HashMap::new();
    for (row, record) in reader.records().enumerate() {
        let r = record?;
        let p: f64 = header.get(&r, price).parse().map_err(|_| {
            Error::Data(format!(
                "prices column \"sell_price\" is not numeric on row {}",
                row + 2
            ))
        })?;
        map.entry((
            header.get(&r, store).to_string(),
            header.get(&r, item).to_string(),
        ))
        .or_default()
        .insert(header.get(&r, week).to_string(), p);
    }
    Ok(map)
}

/// Fill gaps forward then backward; returns the filled values and a flag
/// channel marking days whose price was absent from the table.
fn fill_prices(raw: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    let flags: Vec<f64> = raw.iter().map(|p| f64::from(p.is_none())).collect();
    let mut filled: Vec<f64> = Vec::with_capacity(raw.len());
    let mut last = None;
    for p in raw {
        last = p.or(last);
        filled.push(last.unwrap_or(f64::NAN));
    }
    let mut next = None;
    for (i, p) in raw.iter().enumerate().rev() {
        next = p.or(next);
        if filled[i].is_nan() {
            filled[i] = next.unwrap_or(0.0);
        }
    }
    (filled, flags)
}

/// Load the M5 dataset. `limit` keeps only the first K sales rows, in file
/// order, for desk-scale runs.
pub fn load_m5(
    sales_path: &Path,
    calendar_path: &Path,
    prices_path: &Path,
    limit: Option<usize>,
) -> Result<Dataset> {
    let calendar_days = read_calendar(calendar_path)?;
    let prices = read_prices(prices_path)?;

    let mut reader = csv::Reader::from_path(sales_path)?;
    let header = Header::new(reader.headers()?);
    let id = header.col("sales", "id")?;
    let attr_cols: Vec<(String, usize)> = ["item_id", "dept_id", "cat_id", "store_id", "state_id"]
        .iter()
        .map(|&name| header.col("sales", name).map(|i| (name.to_string(), i)))
        .collect::<Result<_>>()?;
    let mut day_cols: Vec<(usize, usize)> = header
        .index
        .iter()
        .filter_map(|(name, &i)| {
            name.strip_prefix("d_")
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, i))
        })
        .collect();
    day_cols.sort_unstable();
    if day_cols.is_empty() {
        return Err(Error::Data("sales is missing column \"d_1\"".into()));
    }
    let n_days = day_cols.len();
    if calendar_days.len() < n_days {
        return Err(Error::Data(format!(
            "calendar covers {} days but sales has {n_days}",
            calendar_days.len()
        )));
    }
    let days = &calendar_days[..n_days];

    let mut series = Vec::new();
    for record in reader.records() {
        if limit.is_some_and(|k| series.len() >= k) {
            break;
        }
        let r = record?;
        let mut demand = Vec::with_capacity(n_days);
        for &(n, col) in &day_cols {
            let v: u32 = header.get(&r, col).parse().map_err(|_| {
                Error::Data(format!(
                    "sales column \"d_{n}\" is not a nonnegative integer for id {:?}",
                    header.get(&r, id)
                ))
            })?;
            demand.push(v);
        }
        let attrs: std::collections::BTreeMap<String, String> = attr_cols
            .iter()
            .map(|(name, col)| (name.clone(), header.get(&r, *col).to_string()))
            .collect();

        let state = attrs.get("state_id").cloned().unwrap_or_default();
        let snap: Vec<f64> = days
            .iter()
            .map(|d| d.snap.get(&state).copied().unwrap_or(0.0))
            .collect();
        let event: Vec<f64> = days.iter().map(|d| d.event).collect();

        let key = (
            attrs.get("store_id").cloned().unwrap_or_default(),
            attrs.get("item_id").cloned().unwrap_or_default(),
        );
        let weekly = prices.get(&key);
        let raw: Vec<Option<f64>> = days
            .iter()
            .map(|d| weekly.and_then(|w| w.get(&d.week)).copied())
            .collect();
        let (price, price_missing) = fill_prices(&raw);

        series.push(SeriesRecord {
            id: header.get(&r, id).to_string(),
            demand,
            attrs,
            channels: vec![
                Channel {
                    name: "snap".into(),
                    values: snap,
                    known_future: true,
                    standardize: false,
                },
                Channel {
                    name: "event".into(),
                    values: event,
                    known_future: true,
                    standardize: false,
                },
                Channel {
                    name: "price".into(),
                    values: price,
                    known_future: true,
                    standardize: true,
                },
                Channel {
                    name: "price_missing".into(),
                    values: price_missing,
                    known_future: true,
                    standardize: false,
                },
            ],
        });
    }

    let dataset = Dataset {
        series,
        calendar: Calendar {
            n_days,
            weekday: days.iter().map(|d| d.weekday).collect(),
            year_frac: days.iter().map(|d| d.year_frac).collect(),
        },
        truth: None,
    };
    dataset.validate()?;
    Ok(dataset)
}
