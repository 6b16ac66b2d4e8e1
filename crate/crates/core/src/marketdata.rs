//! Trade ingestion, 1 Hz OHLCV aggregation and chronological splitting.
//!
//! Volume on a [`Bar`] is quote-denominated notional (`price * size`), which is
//! what the fee model consumes. Seconds without trades are filled with a flat
//! bar at the previous close and zero volume so the simulation clock is uniform.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub timestamp_ms: i64,
    pub price: f64,
    pub size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub t: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn flat(t: i64, price: f64, volume: f64) -> Self {
        Bar { t, open: price, high: price, low: price, close: price, volume }
    }

    fn is_consistent(&self) -> bool {
        self.low <= self.open
            && self.open <= self.high
            && self.low <= self.close
            && self.close <= self.high
            && self.volume >= 0.0
            && self.low > 0.0
    }
}

/// Gap-free 1 Hz bars with optional train/validation/test boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    bars: Vec<Bar>,
    split_marks: Option<(usize, usize)>,
}

impl BarSeries {
    /// Wraps bars, checking that `t` runs over consecutive seconds and every
    /// bar is internally consistent.
    pub fn new(bars: Vec<Bar>) -> Result<Self> {
        if bars.is_empty() {
            return Err(Error::EmptyData);
        }
        for (i, pair) in bars.windows(2).enumerate() {
            if pair[1].t != pair[0].t + 1 {
                return Err(Error::Domain(format!(
                    "bar {} has t={} after t={}; series must be gap-free",
                    i + 1,
                    pair[1].t,
                    pair[0].t
                )));
            }
        }
        if let Some(i) = bars.iter().position(|b| !b.is_consistent()) {
            return Err(Error::Domain(format!("bar {i} violates OHLCV ordering")));
        }
        Ok(BarSeries { bars, split_marks: None })
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.volume).collect()
    }

    pub fn split_marks(&self) -> Option<(usize, usize)> {
        self.split_marks
    }

    pub fn train_range(&self) -> Range<usize> {
        match self.split_marks {
            Some((a, _)) => 0..a,
            None => 0..self.len(),
        }
    }

    pub fn val_range(&self) -> Range<usize> {
        match self.split_marks {
            Some((a, b)) => a..b,
            None => 0..0,
        }
    }

    pub fn test_range(&self) -> Range<usize> {
        match self.split_marks {
            Some((_, b)) => b..self.len(),
            None => 0..self.len(),
        }
    }

    /// Copies a contiguous slice of bars into a new, unsplit series.
    pub fn segment(&self, range: Range<usize>) -> Result<BarSeries> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::EmptyData);
        }
        Ok(BarSeries { bars: self.bars[range].to_vec(), split_marks: None })
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let bars = rdr.deserialize().collect::<std::result::Result<Vec<Bar>, _>>()?;
        BarSeries::new(bars)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for bar in &self.bars {
            wtr.serialize(bar)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn read_trades_csv<R: Read>(reader: R) -> Result<Vec<Trade>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let trades = rdr.deserialize().collect::<std::result::Result<Vec<Trade>, _>>()?;
    for (i, tr) in trades.iter().enumerate() {
        if !(tr.price > 0.0 && tr.size > 0.0) {
            return Err(Error::Domain(format!("trade row {i}: price and size must be positive")));
        }
    }
    Ok(trades)
}

pub fn write_trades_csv<W: Write>(trades: &[Trade], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for tr in trades {
        wtr.serialize(tr)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Aggregates trades into one bar per second, from the first trade's second
/// to the last trade's second inclusive.
pub fn aggregate(trades: &[Trade]) -> Result<BarSeries> {
    let first = trades.first().ok_or(Error::EmptyData)?;
    if let Some(row) = trades.windows(2).position(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        return Err(Error::UnsortedInput { row: row + 1 });
    }
    let second_of = |tr: &Trade| tr.timestamp_ms.div_euclid(1000);

    let start = second_of(first);
    let end = second_of(trades.last().unwrap());
    let mut bars = Vec::with_capacity((end - start + 1) as usize);
    let mut iter = trades.iter().peekable();
    let mut last_close = first.price;

    for t in start..=end {
        let mut bar: Option<Bar> = None;
        while let Some(tr) = iter.next_if(|tr| second_of(tr) == t) {
            let notional = tr.price * tr.size;
            match bar.as_mut() {
                None => bar = Some(Bar::flat(t, tr.price, notional)),
                Some(b) => {
                    b.high = b.high.max(tr.price);
                    b.low = b.low.min(tr.price);
                    b.close = tr.price;
                    b.volume += notional;
                }
            }
        }
        let bar = bar.unwrap_or_else(|| Bar::flat(t, last_close, 0.0));
        last_close = bar.close;
        bars.push(bar);
    }
    BarSeries::new(bars)
}

/// Marks chronological train/validation/test boundaries at
/// `floor(n * train)` and `floor(n * (train + val))`.
pub fn split(mut series: BarSeries, fractions: (f64, f64, f64)) -> Result<BarSeries> {
    let (train, val, test) = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(Error::InvalidFractions(format!("{fractions:?} must all be positive")));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!("{fractions:?} do not sum to 1")));
    }
    let n = series.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("{n} bars cannot be split three ways")));
    }
    // Slack absorbs representation error such as 0.85 * 100 = 84.999...
    let mark = |frac: f64| ((n as f64 * frac + 1e-9).floor() as usize).min(n);
    let a = mark(train);
    let b = mark(train + val).max(a);
    series.split_marks = Some((a, b));
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(ms: i64, price: f64, size: f64) -> Trade {
        Trade { timestamp_ms: ms, price, size }
    }

    #[test]
    fn two_trades_same_second() {
        let s = aggregate(&[tr(5_000, 100.0, 1.0), tr(5_400, 102.0, 1.0)]).unwrap();
        assert_eq!(s.bars(), &[Bar { t: 5, open: 100.0, high: 102.0, low: 100.0, close: 102.0, volume: 202.0 }]);
    }

    #[test]
    fn single_trade_bar() {
        let s = aggregate(&[tr(1_234, 50.0, 2.0)]).unwrap();
        assert_eq!(s.bars(), &[Bar::flat(1, 50.0, 100.0)]);
    }

    #[test]
    fn gap_second_carries_close() {
        let s = aggregate(&[tr(5_000, 100.0, 1.0), tr(5_900, 101.0, 1.0), tr(7_100, 99.0, 3.0)]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.bars()[1], Bar::flat(6, 101.0, 0.0));
        assert_eq!(s.bars()[2].volume, 297.0);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::EmptyData)));
        let r = aggregate(&[tr(2_000, 1.0, 1.0), tr(1_000, 1.0, 1.0)]);
        assert!(matches!(r, Err(Error::UnsortedInput { row: 1 })));
    }

    fn flat_series(n: usize) -> BarSeries {
        BarSeries::new((0..n as i64).map(|t| Bar::flat(t, 100.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn split_marks_floor() {
        assert_eq!(split(flat_series(100), (0.7, 0.15, 0.15)).unwrap().split_marks(), Some((70, 85)));
        assert_eq!(split(flat_series(10), (0.7, 0.15, 0.15)).unwrap().split_marks(), Some((7, 8)));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split(flat_series(10), (0.5, 0.5, 0.1)), Err(Error::InvalidFractions(_))));
        assert!(matches!(split(flat_series(2), (0.7, 0.15, 0.15)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn csv_round_trip() {
        let s = aggregate(&[tr(5_000, 100.0, 1.0), tr(7_000, 102.5, 0.5)]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t,open,high,low,close,volume\n"));
        assert_eq!(BarSeries::read_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn rejects_gapped_series() {
        let bars = vec![Bar::flat(0, 1.0, 0.0), Bar::flat(2, 1.0, 0.0)];
        assert!(BarSeries::new(bars).is_err());
    }
}
