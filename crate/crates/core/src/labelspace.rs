//! Power-set label codec over a partition of event categories.
//!
//! Categories are split into disjoint groups; within a group every subset
//! of simultaneously active categories is one class. The class index of a
//! subset is `Σ 2^p` over the positions `p` (within the group) of its
//! active members, so the first member is the least significant bit.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// The 16 categories of the synthetic polyphonic benchmark, in table order.
pub const DEFAULT_CATEGORIES: [&str; 16] = [
    "alarms & sirens",
    "baby crying",
    "bird singing",
    "bus",
    "cat meowing",
    "crowd applause",
    "crowd cheering",
    "dog barking",
    "footsteps",
    "glass smash",
    "gun shot",
    "horsewalk",
    "mixer",
    "motorcycle",
    "rain",
    "thunder",
];

/// Largest group size whose class index still fits a `u32`.
pub const MAX_GROUP_SIZE: usize = 31;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new<I, T>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Empty("category set"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() || n.trim() != n {
                return Err(Error::InvalidArgument(format!(
                    "category name {n:?} is blank or padded"
                )));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidArgument(format!("duplicate category {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for CategorySet {
    fn default() -> Self {
        Self {
            names: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Ordered partition of `Y` categories into `N` disjoint, non-empty groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDecomposition {
    groups: Vec<Vec<usize>>,
    categories: usize,
    /// `(task, position)` of every category
    lookup: Vec<(usize, usize)>,
}

impl TaskDecomposition {
    /// Validates that `groups` partition `0..categories`.
    pub fn new(groups: Vec<Vec<usize>>, categories: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Empty("decomposition"));
        }
        let mut lookup = vec![None; categories];
        for (task, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidArgument(format!("group {task} is empty")));
            }
            if group.len() > MAX_GROUP_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "group {task} has {} categories, at most {MAX_GROUP_SIZE} supported",
                    group.len()
                )));
            }
            for (pos, &cat) in group.iter().enumerate() {
                let slot = lookup.get_mut(cat).ok_or(Error::OutOfRange {
                    what: "category index",
                    index: cat,
                    limit: categories,
                })?;
                if slot.is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "category {cat} assigned to more than one group"
                    )));
                }
                *slot = Some((task, pos));
            }
        }
        let lookup = lookup
            .into_iter()
            .enumerate()
            .map(|(cat, s)| {
                s.ok_or_else(|| Error::InvalidArgument(format!("category {cat} is in no group")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            categories,
            lookup,
        })
    }

    /// `tasks` contiguous groups of equal size in category order.
    pub fn equal_split(categories: usize, tasks: usize) -> Result<Self> {
        if tasks == 0 || categories == 0 || !categories.is_multiple_of(tasks) {
            return Err(Error::InvalidArgument(format!(
                "{tasks} tasks do not divide {categories} categories evenly"
            )));
        }
        let size = categories / tasks;
        Self::new(
            (0..tasks)
                .map(|t| (t * size..(t + 1) * size).collect())
                .collect(),
            categories,
        )
    }

    /// Groups given by category names.
    pub fn from_names(groups: &[Vec<String>], set: &CategorySet) -> Result<Self> {
        let groups = groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|n| {
                        set.index_of(n).ok_or_else(|| {
                            Error::InvalidArgument(format!("unknown category {n:?}"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups, set.len())
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    /// `(task, position within group)` of a category.
    pub fn locate(&self, category: usize) -> (usize, usize) {
        self.lookup[category]
    }

    /// `[2^{Y_1}, …, 2^{Y_N}]`.
    pub fn class_counts(&self) -> Vec<u64> {
        self.groups.iter().map(|g| 1u64 << g.len()).collect()
    }
}

/// Class index of the active members of `group`; other indices are ignored.
pub fn encode_group(active: &[usize], group: &[usize]) -> u32 {
    group
        .iter()
        .enumerate()
        .filter(|(_, c)| active.contains(c))
        .fold(0, |acc, (p, _)| acc | (1 << p))
}

/// Inverse of [`encode_group`].
pub fn decode_group(index: u32, group: &[usize]) -> Result<Vec<usize>> {
    let limit = 1u64 << group.len();
    if u64::from(index) >= limit {
        return Err(Error::OutOfRange {
            what: "class index",
            index: index as usize,
            limit: limit as usize,
        });
    }
    Ok(group
        .iter()
        .enumerate()
        .filter(|(p, _)| index >> p & 1 == 1)
        .map(|(_, &c)| c)
        .collect())
}

pub fn class_count(decomp: &TaskDecomposition) -> Vec<u64> {
    decomp.class_counts()
}

/// Binary `(T, Y)` frame activity matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameLabelMatrix {
    frames: usize,
    categories: usize,
    data: Vec<u8>,
}

impl FrameLabelMatrix {
    pub fn new(frames: usize, categories: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * categories {
            return Err(Error::shape(
                "FrameLabelMatrix",
                format!(
                    "{frames}x{categories} needs {} entries, got {}",
                    frames * categories,
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "label at frame {} category {} is {}, expected 0 or 1",
                i / categories.max(1),
                i % categories.max(1),
                data[i]
            )));
        }
        Ok(Self {
            frames,
            categories,
            data,
        })
    }

    pub fn zeros(frames: usize, categories: usize) -> Self {
        Self {
            frames,
            categories,
            data: vec![0; frames * categories],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, frame: usize, category: usize) -> bool {
        self.data[frame * self.categories + category] == 1
    }

    pub fn set(&mut self, frame: usize, category: usize, active: bool) {
        self.data[frame * self.categories + category] = u8::from(active);
    }

    pub fn row(&self, frame: usize) -> &[u8] {
        &self.data[frame * self.categories..(frame + 1) * self.categories]
    }

    /// Number of active categories in a frame.
    pub fn degree(&self, frame: usize) -> usize {
        self.row(frame).iter().filter(|&&v| v == 1).count()
    }

    /// Rows `start..start + len`; rows past the end are filled with zeros.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(len, self.categories);
        let end = (start + len).min(self.frames);
        if start < end {
            let src = &self.data[start * self.categories..end * self.categories];
            out.data[..src.len()].copy_from_slice(src);
        }
        out
    }

    /// Vertical concatenation.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let categories = parts.first().map_or(0, |p| p.categories);
        if parts.iter().any(|p| p.categories != categories) {
            return Err(Error::shape(
                "FrameLabelMatrix::concat",
                "category counts differ",
            ));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            frames: data.len() / categories.max(1),
            categories,
            data,
        })
    }

    /// Keeps only the frames where `keep` is true.
    pub fn select(&self, keep: &[bool]) -> Self {
        let mut data = Vec::new();
        for (f, &k) in keep.iter().enumerate().take(self.frames) {
            if k {
                data.extend_from_slice(self.row(f));
            }
        }
        Self {
            frames: data.len() / self.categories.max(1),
            categories: self.categories,
            data,
        }
    }
}

/// `(T, N)` matrix of per-task class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskTargets {
    frames: usize,
    tasks: usize,
    data: Vec<u32>,
}

impl TaskTargets {
    pub fn new(frames: usize, tasks: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != frames * tasks {
            return Err(Error::shape(
                "TaskTargets",
                format!(
                    "{frames}x{tasks} needs {} entries, got {}",
                    frames * tasks,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            frames,
            tasks,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, frame: usize, task: usize) -> u32 {
        self.data[frame * self.tasks + task]
    }

    /// Column of one task, one index per frame.
    pub fn task_column(&self, task: usize) -> Vec<u32> {
        (0..self.frames).map(|f| self.get(f, task)).collect()
    }
}

pub fn encode_targets(
    labels: &FrameLabelMatrix,
    decomp: &TaskDecomposition,
) -> Result<TaskTargets> {
    if labels.categories() != decomp.categories() {
        return Err(Error::shape(
            "encode_targets",
            format!(
                "labels have {} categories, decomposition covers {}",
                labels.categories(),
                decomp.categories()
            ),
        ));
    }
    let n = decomp.tasks();
    let mut data = vec![0u32; labels.frames() * n];
    for f in 0..labels.frames() {
        for (c, &v) in labels.row(f).iter().enumerate() {
            if v == 1 {
                let (task, pos) = decomp.locate(c);
                data[f * n + task] |= 1 << pos;
            }
        }
    }
    TaskTargets::new(labels.frames(), n, data)
}

pub fn decode_predictions(
    indices: &TaskTargets,
    decomp: &TaskDecomposition,
) -> Result<FrameLabelMatrix> {
    if indices.tasks() != decomp.tasks() {
        return Err(Error::shape(
            "decode_predictions",
            format!(
                "{} task columns for {} tasks",
                indices.tasks(),
                decomp.tasks()
            ),
        ));
    }
    let mut out = FrameLabelMatrix::zeros(indices.frames(), decomp.categories());
    for f in 0..indices.frames() {
        for (task, group) in decomp.groups().iter().enumerate() {
            for c in decode_group(indices.get(f, task), group)? {
                out.set(f, c, true);
            }
        }
    }
    Ok(out)
}
