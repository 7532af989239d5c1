//! Schedule space: `(split_dim, sword, sched_type)` triples defined on an
//! output shape, and the per-block chunk geometry they induce.
//!
//! A Row schedule fixes every dim left of `split_dim`, cuts `split_dim` into
//! `sword` equal slices and keeps trailing dims whole, so each chunk is a
//! contiguous range of the row-major linear index. Column mirrors this on
//! the column-major linearization. [`Partition`] is that canonical form:
//! two schedules that cut a shape identically compare equal through it.

mod propagate;
mod resolve;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

pub use propagate::{propagate, Unsatisfiable};
pub use resolve::{resolve_schedule, SchedulePlan};

use crate::ir::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchedType {
    Row,
    Column,
}

impl SchedType {
    pub fn name(self) -> &'static str {
        match self {
            SchedType::Row => "row",
            SchedType::Column => "col",
        }
    }
}

impl FromStr for SchedType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "row" | "r" => Ok(SchedType::Row),
            "col" | "column" | "c" => Ok(SchedType::Column),
            other => Err(format!("unknown sched_type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Schedule {
    pub split_dim: usize,
    pub sword: usize,
    pub sched_type: SchedType,
}

impl Schedule {
    /// `(0, 1, Row)`: one block computing the whole work space.
    pub const DEFAULT: Schedule = Schedule {
        split_dim: 0,
        sword: 1,
        sched_type: SchedType::Row,
    };

    pub fn row(split_dim: usize, sword: usize) -> Self {
        Schedule {
            split_dim,
            sword,
            sched_type: SchedType::Row,
        }
    }

    pub fn column(split_dim: usize, sword: usize) -> Self {
        Schedule {
            split_dim,
            sword,
            sched_type: SchedType::Column,
        }
    }

    pub fn is_valid_for(&self, shape: &Shape) -> bool {
        if shape.rank() == 0 {
            return *self == Schedule::DEFAULT;
        }
        self.split_dim < shape.rank()
            && self.sword >= 1
            && shape.dims[self.split_dim] % self.sword == 0
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.split_dim, self.sword, self.sched_type.name())
    }
}

impl FromStr for Schedule {
    type Err = String;

    /// Parses `d,s,type`, e.g. `1,4,row`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected `split_dim,sword,type`, got `{s}`"));
        }
        let split_dim = parts[0]
            .parse()
            .map_err(|_| format!("bad split_dim `{}`", parts[0]))?;
        let sword = parts[1]
            .parse()
            .map_err(|_| format!("bad sword `{}`", parts[1]))?;
        Ok(Schedule {
            split_dim,
            sword,
            sched_type: parts[2].parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvalidSchedule {
    pub schedule: Schedule,
    pub shape: Shape,
}

impl fmt::Display for InvalidSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "schedule ({}) is not valid on {}", self.schedule, self.shape)
    }
}

impl std::error::Error for InvalidSchedule {}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// All legal schedules: ascending split_dim, ascending sword, Row before Column.
pub fn enumerate_schedules(shape: &Shape) -> Vec<Schedule> {
    if shape.rank() == 0 {
        return vec![Schedule::DEFAULT];
    }
    let mut out = Vec::new();
    for (d, &k) in shape.dims.iter().enumerate() {
        for sword in divisors(k) {
            out.push(Schedule::row(d, sword));
            out.push(Schedule::column(d, sword));
        }
    }
    out
}

pub fn blocks_of(shape: &Shape, schedule: &Schedule) -> Result<usize, InvalidSchedule> {
    if !schedule.is_valid_for(shape) {
        return Err(InvalidSchedule {
            schedule: *schedule,
            shape: shape.clone(),
        });
    }
    if shape.rank() == 0 {
        return Ok(1);
    }
    let d = schedule.split_dim;
    let outer: usize = match schedule.sched_type {
        SchedType::Row => shape.dims[..d].iter().product(),
        SchedType::Column => shape.dims[d + 1..].iter().product(),
    };
    Ok(outer * schedule.sword)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    RowMajor,
    ColMajor,
}

/// Canonical chunk decomposition of a shape: chunk `b` is the linear range
/// `[b * chunk_len, (b + 1) * chunk_len)` in `order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Partition {
    pub order: Order,
    pub chunk_len: usize,
    pub blocks: usize,
}

impl Partition {
    pub fn whole(shape: &Shape) -> Self {
        Partition {
            order: Order::RowMajor,
            chunk_len: shape.element_count(),
            blocks: 1,
        }
    }

    pub fn of(shape: &Shape, schedule: &Schedule) -> Result<Self, InvalidSchedule> {
        let blocks = blocks_of(shape, schedule)?;
        let count = shape.element_count();
        let non_unit = shape.dims.iter().filter(|&&d| d > 1).count();
        let order = if blocks == 1 || non_unit <= 1 {
            Order::RowMajor
        } else {
            match schedule.sched_type {
                SchedType::Row => Order::RowMajor,
                SchedType::Column => Order::ColMajor,
            }
        };
        Ok(Partition {
            order,
            chunk_len: count / blocks,
            blocks,
        })
    }

    pub fn is_whole(&self) -> bool {
        self.blocks == 1
    }

    /// Position of a multi-index in this partition's linear order.
    pub fn position(&self, shape: &Shape, index: &[usize]) -> usize {
        match self.order {
            Order::RowMajor => shape.linear_index(index),
            Order::ColMajor => index
                .iter()
                .zip(&shape.dims)
                .rev()
                .fold(0, |acc, (&i, &d)| acc * d + i),
        }
    }

    pub fn index_at(&self, shape: &Shape, mut position: usize) -> Vec<usize> {
        match self.order {
            Order::RowMajor => shape.multi_index(position),
            Order::ColMajor => {
                let mut index = vec![0; shape.rank()];
                for (d, &extent) in shape.dims.iter().enumerate() {
                    index[d] = position % extent;
                    position /= extent;
                }
                index
            }
        }
    }

    pub fn block_of(&self, shape: &Shape, index: &[usize]) -> usize {
        self.position(shape, index) / self.chunk_len
    }

    pub fn chunk(&self, block: usize) -> Range<usize> {
        block * self.chunk_len..(block + 1) * self.chunk_len
    }
}
