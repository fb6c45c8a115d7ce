//! Simulated processes and control groups.
//!
//! The registry mirrors the two views the kernel keeps of a process: its
//! place in the parent/child tree (rooted at `initd`, pid 1) and the control
//! group it was placed in. The two are independent: a child inherits its
//! parent's group on `spawn`, but `exec_in_group` can put it anywhere.

use std::collections::{BTreeMap, BTreeSet};

use crate::trace::{EventKind, KillCause};
use crate::{Pid, SimError, Simulation, Tick};

pub const ROOT_PID: Pid = Pid(1);
pub const ROOT_GROUP: &str = "/";
/// Returned by `find_group` for pids the registry has never seen.
pub const UNKNOWN_GROUP: &str = "NULL";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Runnable,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub pid: Pid,
    /// `Pid(0)` for the root task only.
    pub ppid: Pid,
    pub name: String,
    pub group: String,
    pub utime: Tick,
    pub stime: Tick,
    pub state: TaskState,
}

impl Task {
    /// System plus user time.
    pub fn time(&self) -> Tick {
        self.stime + self.utime
    }

    pub fn is_runnable(&self) -> bool {
        self.state == TaskState::Runnable
    }
}

/// Accepts `/` and `/<name>[/<name>...]` with non-empty, whitespace-free
/// segments.
pub fn validate_group_path(path: &str) -> Result<(), SimError> {
    if path == ROOT_GROUP {
        return Ok(());
    }
    let well_formed = path
        .strip_prefix('/')
        .map(|rest| {
            rest.split('/').all(|segment| {
                !segment.is_empty() && !segment.chars().any(|c| c.is_whitespace() || c.is_control())
            })
        })
        .unwrap_or(false);
    if well_formed {
        Ok(())
    } else {
        Err(SimError::MalformedGroupPath(path.to_owned()))
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    tasks: BTreeMap<Pid, Task>,
    groups: BTreeMap<String, BTreeSet<Pid>>,
    next_pid: u64,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

impl Registry {
    /// A registry holding only `initd` (pid 1, group `/`).
    pub fn new() -> Self {
        let root = Task {
            pid: ROOT_PID,
            ppid: Pid(0),
            name: "initd".to_owned(),
            group: ROOT_GROUP.to_owned(),
            utime: 0,
            stime: 0,
            state: TaskState::Runnable,
        };
        let mut groups = BTreeMap::new();
        groups.insert(ROOT_GROUP.to_owned(), BTreeSet::from([ROOT_PID]));
        Registry {
            tasks: BTreeMap::from([(ROOT_PID, root)]),
            groups,
            next_pid: ROOT_PID.0 + 1,
        }
    }

    /// Creates a child of `parent`. With `group == None` the child inherits
    /// the parent's group.
    pub(crate) fn create(
        &mut self,
        parent: Pid,
        name: &str,
        group: Option<&str>,
    ) -> Result<&Task, SimError> {
        if let Some(path) = group {
            validate_group_path(path)?;
        }
        let parent_task = self
            .tasks
            .get(&parent)
            .filter(|t| t.is_runnable())
            .ok_or(SimError::NoSuchParent(parent))?;
        let group = group.unwrap_or(&parent_task.group).to_owned();

        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        self.groups.entry(group.clone()).or_default().insert(pid);
        let task = Task {
            pid,
            ppid: parent,
            name: name.to_owned(),
            group,
            utime: 0,
            stime: 0,
            state: TaskState::Runnable,
        };
        Ok(self.tasks.entry(pid).or_insert(task))
    }

    pub fn task(&self, pid: Pid) -> Option<&Task> {
        self.tasks.get(&pid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn is_runnable(&self, pid: Pid) -> bool {
        self.tasks.get(&pid).is_some_and(Task::is_runnable)
    }

    /// The task's group path, `/` for ungrouped tasks, or `"NULL"` when the
    /// pid is unknown.
    pub fn find_group(&self, pid: Pid) -> &str {
        self.tasks
            .get(&pid)
            .map(|t| t.group.as_str())
            .unwrap_or(UNKNOWN_GROUP)
    }

    pub fn group_members(&self, path: &str) -> Option<&BTreeSet<Pid>> {
        self.groups.get(path)
    }

    pub fn group_paths(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn task_time(&self, pid: Pid) -> Result<Tick, SimError> {
        self.tasks
            .get(&pid)
            .map(Task::time)
            .ok_or(SimError::NoSuchTask(pid))
    }

    /// Walks ppid links from `pid` up to the root, inclusive at both ends.
    /// Returns `None` if a link is dangling or the walk revisits a pid.
    pub fn lineage(&self, pid: Pid) -> Option<Vec<Pid>> {
        let mut chain = vec![pid];
        let mut current = self.tasks.get(&pid)?;
        while current.pid != ROOT_PID {
            let parent = self.tasks.get(&current.ppid)?;
            if chain.contains(&parent.pid) {
                return None;
            }
            chain.push(parent.pid);
            current = parent;
        }
        Some(chain)
    }

    /// Returns `Ok(true)` if the task transitioned to DEAD, `Ok(false)` if
    /// it was already dead.
    pub(crate) fn mark_dead(&mut self, pid: Pid) -> Result<bool, SimError> {
        let task = self.tasks.get_mut(&pid).ok_or(SimError::NoSuchTask(pid))?;
        let was_runnable = task.is_runnable();
        task.state = TaskState::Dead;
        Ok(was_runnable)
    }

    pub(crate) fn charge(&mut self, pid: Pid, utime: Tick, stime: Tick) {
        if let Some(task) = self.tasks.get_mut(&pid).filter(|t| t.is_runnable()) {
            task.utime += utime;
            task.stime += stime;
        }
    }
}

impl Simulation {
    /// Forks a child of `parent` into the parent's group and enqueues it.
    pub fn spawn(&mut self, parent: Pid, name: &str) -> Result<Pid, SimError> {
        self.create_task(parent, name, None)
    }

    /// Like [`Simulation::spawn`], but places the child in `group`
    /// (the `cgexec -g *:<group>` launch pattern). The group is created on
    /// first use.
    pub fn exec_in_group(&mut self, group: &str, parent: Pid, name: &str) -> Result<Pid, SimError> {
        self.create_task(parent, name, Some(group))
    }

    fn create_task(
        &mut self,
        parent: Pid,
        name: &str,
        group: Option<&str>,
    ) -> Result<Pid, SimError> {
        let task = self.registry.create(parent, name, group)?;
        let (pid, group) = (task.pid, task.group.clone());
        self.scheduler.run_queue.push_back(pid);
        self.emit(EventKind::Spawn {
            pid,
            ppid: parent,
            group,
            name: name.to_owned(),
        });
        Ok(pid)
    }

    pub fn find_group(&self, pid: Pid) -> &str {
        self.registry.find_group(pid)
    }

    /// Kernel-level kill: the task is marked dead and dropped from the run
    /// queue. Nothing else happens; its connections stay exactly as they
    /// were. Killing an already-dead task only records a warning.
    pub fn free_task(&mut self, pid: Pid) -> Result<(), SimError> {
        self.free_task_with_cause(pid, KillCause::Direct)
    }

    pub(crate) fn free_task_with_cause(
        &mut self,
        pid: Pid,
        cause: KillCause,
    ) -> Result<(), SimError> {
        if self.registry.mark_dead(pid)? {
            self.scheduler.run_queue.retain(|&p| p != pid);
            let group = self.registry.find_group(pid).to_owned();
            self.emit(EventKind::Kill { pid, group, cause });
        } else {
            self.emit(EventKind::Warn {
                pid,
                reason: "duplicate kill".to_owned(),
            });
        }
        Ok(())
    }
}
