//! Task definitions: which volumes condition the model and which is the target.

use crate::degrade::DegradationOperator;
use crate::error::{Error, Result};
use crate::volume::{normalize, ValueRange, Volume};

/// Super-resolution, modality translation, or both conditions at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Sr,
    Mt,
    Both,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sr => "sr",
            Task::Mt => "mt",
            Task::Both => "both",
        }
    }

    pub fn cond_channels(self) -> usize {
        match self {
            Task::Sr | Task::Mt => 1,
            Task::Both => 2,
        }
    }

    /// Index of the pooled condition, if the task has one.
    pub fn pooled_condition(self) -> Option<usize> {
        match self {
            Task::Sr | Task::Both => Some(0),
            Task::Mt => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(Task::Sr),
            "mt" => Ok(Task::Mt),
            "both" => Ok(Task::Both),
            other => Err(Error::Config(format!("unknown task {other:?} (sr, mt, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInputs {
    pub cond: Vec<Volume>,
    pub target: Volume,
}

impl TaskInputs {
    /// Rescale every volume from `[0, 1]` to the model's `[-1, 1]`.
    pub fn to_model(&self) -> Result<TaskInputs> {
        let f = |v: &Volume| normalize(v, ValueRange::METRIC, ValueRange::MODEL);
        Ok(TaskInputs {
            cond: self.cond.iter().map(f).collect::<Result<_>>()?,
            target: f(&self.target)?,
        })
    }
}

/// `modA` is always the target. SR conditions on `A(modA)`, MT on `modB`,
/// and both on `(A(modA), modB)`.
pub fn make_task_inputs(mod_a: &Volume, mod_b: &Volume, task: Task, op: &DegradationOperator) -> Result<TaskInputs> {
    if mod_a.dims() != mod_b.dims() {
        return Err(Error::Pairing {
            a: mod_a.dims(),
            b: mod_b.dims(),
        });
    }
    let cond = match task {
        Task::Sr => vec![op.apply(mod_a)?],
        Task::Mt => vec![mod_b.clone()],
        Task::Both => vec![op.apply(mod_a)?, mod_b.clone()],
    };
    Ok(TaskInputs {
        cond,
        target: mod_a.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn inputs_per_task() {
        let (a, b) = generate_phantom(&PhantomSpec::with_dims([16, 16, 8], 1), 0).unwrap();
        let op = DegradationOperator::avg_pool(4);
        let sr = make_task_inputs(&a, &b, Task::Sr, &op).unwrap();
        assert!(op.range_residual(&sr.cond[0]).unwrap() < 1e-6);
        assert_eq!(sr.target, a);
        let mt = make_task_inputs(&a, &b, Task::Mt, &op).unwrap();
        assert_eq!(mt.cond, vec![b.clone()]);
        assert_eq!(mt.target, a);
        let both = make_task_inputs(&a, &b, Task::Both, &op).unwrap();
        assert_eq!(both.cond.len(), Task::Both.cond_channels());
        let m = both.to_model().unwrap();
        assert!(m.target.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(op.range_residual(&m.cond[0]).unwrap() < 1e-5);
    }

    #[test]
    fn parse() {
        assert_eq!("both".parse::<Task>().unwrap(), Task::Both);
        assert!("seg".parse::<Task>().is_err());
    }
}
