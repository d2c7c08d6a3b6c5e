use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use super::{
    CostTable, ExecMode, LatencyReport, ModeSwitch, RequestLatency, Resource, Task, TaskKind, TimelineEntry, PS_PER_S,
};
use crate::isa::InstructionKind;
use crate::workload::InferenceRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    ProcessorDone,
    PimWake { generation: u64 },
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Fixed,
    /// Work is counted in half-picosecond units: full mode retires two per
    /// picosecond, half mode one.
    Compute { units_left: u64, since: u64, rate: u64 },
}

#[derive(Debug)]
struct PimJob {
    task: usize,
    phase: Phase,
    seg_start: u64,
    seg_instr: Option<InstructionKind>,
}

struct Scheduler<'a> {
    mode: ExecMode,
    req: InferenceRequest,
    costs: &'a CostTable,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64, Event)>>,
    tasks: Vec<Task>,
    durations: Vec<u64>,
    waiting_on: Vec<usize>,
    dependents: Vec<Vec<usize>>,
    proc_queue: VecDeque<usize>,
    proc_current: Option<usize>,
    pim_ready: BTreeSet<usize>,
    pim_job: Option<PimJob>,
    generation: u64,
    instr: Option<InstructionKind>,
    next_half: InstructionKind,
    timeline: Vec<TimelineEntry>,
    switches: Vec<ModeSwitch>,
    pim_bytes: u64,
}

/// Runs one workload under `mode` on the event queue.
///
/// GPU-only puts every task on the processor: prefills back to back, then
/// batched decode steps ordered by step and request. HBCEM runs all prefills
/// and then every decode token on the PIM in full mode, never overlapping the
/// two resources. LBIM lets the PIM decode ready requests while the
/// processor is still prefilling later ones; the PIM computes in half mode
/// (alternating `MACT_LDB` and `MACB_LDT`) while the processor is busy and
/// switches to `PIM_MAC_FM` the moment it goes idle, even mid-token.
pub fn simulate(mode: ExecMode, req: &InferenceRequest, costs: &CostTable) -> LatencyReport {
    let mut s = Scheduler::new(mode, *req, costs);
    s.run();
    s.into_report()
}

impl<'a> Scheduler<'a> {
    fn new(mode: ExecMode, req: InferenceRequest, costs: &'a CostTable) -> Self {
        let batch = req.batch as usize;
        let lout = req.lout as usize;
        let n = batch * (1 + lout);
        let mut tasks = Vec::with_capacity(n);
        let mut durations = Vec::with_capacity(n);
        for r in 0..batch {
            tasks.push(Task {
                id: r,
                request: r,
                kind: TaskKind::Prefill,
                resource: Resource::Processor,
                depends_on: Vec::new(),
                start_ps: 0,
                end_ps: 0,
            });
            let shared = mode == ExecMode::Lbim && r > 0;
            durations.push(if shared { costs.prefill_shared_ps } else { costs.prefill_ps });
        }
        let decode_resource = match mode {
            ExecMode::GpuOnly => Resource::Processor,
            ExecMode::Hbcem | ExecMode::Lbim => Resource::Pim,
        };
        for r in 0..batch {
            for step in 1..=lout {
                let id = tasks.len();
                let mut deps = vec![r];
                if step > 1 {
                    deps.push(id - 1);
                }
                tasks.push(Task {
                    id,
                    request: r,
                    kind: TaskKind::DecodeToken { step: step as u64 },
                    resource: decode_resource,
                    depends_on: deps,
                    start_ps: 0,
                    end_ps: 0,
                });
                durations.push(match mode {
                    ExecMode::GpuOnly => costs.gpu_decode_ps[step - 1],
                    _ => 0,
                });
            }
        }

        let decode_id = |r: usize, step: usize| batch + r * lout + step - 1;
        let mut proc_queue: VecDeque<usize> = (0..batch).collect();
        if mode == ExecMode::GpuOnly {
            for step in 1..=lout {
                proc_queue.extend((0..batch).map(|r| decode_id(r, step)));
            }
        }
        let waiting_on = tasks.iter().map(|t| t.depends_on.len()).collect();
        let mut dependents = vec![Vec::new(); tasks.len()];
        for t in &tasks {
            for &d in &t.depends_on {
                dependents[d].push(t.id);
            }
        }

        Scheduler {
            mode,
            req,
            costs,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            tasks,
            durations,
            waiting_on,
            dependents,
            proc_queue,
            proc_current: None,
            pim_ready: BTreeSet::new(),
            pim_job: None,
            generation: 0,
            instr: None,
            next_half: InstructionKind::MactLdb,
            timeline: Vec::new(),
            switches: Vec::new(),
            pim_bytes: 0,
        }
    }

    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, ev)));
    }

    fn run(&mut self) {
        loop {
            self.dispatch();
            let Some(Reverse((at, _, ev))) = self.queue.pop() else { break };
            debug_assert!(at >= self.now);
            self.now = at;
            match ev {
                Event::ProcessorDone => self.finish_processor_task(),
                Event::PimWake { generation } if generation == self.generation => self.pim_wake(),
                Event::PimWake { .. } => {}
            }
        }
    }

    fn dispatch(&mut self) {
        if self.proc_current.is_none() && (self.mode != ExecMode::Hbcem || self.pim_job.is_none()) {
            if let Some(&id) = self.proc_queue.front() {
                if self.waiting_on[id] == 0 {
                    self.proc_queue.pop_front();
                    self.proc_current = Some(id);
                    self.tasks[id].start_ps = self.now;
                    let end = self.now + self.durations[id];
                    self.push(end, Event::ProcessorDone);
                }
            }
        }
        let pim_allowed = match self.mode {
            ExecMode::GpuOnly => false,
            ExecMode::Hbcem => self.proc_current.is_none() && self.proc_queue.is_empty(),
            ExecMode::Lbim => true,
        };
        if pim_allowed && self.pim_job.is_none() {
            if let Some(id) = self.pim_ready.pop_first() {
                self.start_token(id);
            }
        }
        self.retune_pim();
    }

    fn finish_processor_task(&mut self) {
        let id = self.proc_current.take().expect("processor event without a running task");
        self.tasks[id].end_ps = self.now;
        if self.now > self.tasks[id].start_ps {
            self.timeline.push(TimelineEntry {
                resource: Resource::Processor,
                start_ps: self.tasks[id].start_ps,
                end_ps: self.now,
                task: id,
                instruction: None,
            });
        }
        self.release(id);
    }

    fn release(&mut self, id: usize) {
        for i in 0..self.dependents[id].len() {
            let d = self.dependents[id][i];
            self.waiting_on[d] -= 1;
            if self.waiting_on[d] == 0 && self.tasks[d].resource == Resource::Pim {
                self.pim_ready.insert(d);
            }
        }
    }

    fn step_of(&self, id: usize) -> usize {
        match self.tasks[id].kind {
            TaskKind::DecodeToken { step } => step as usize,
            TaskKind::Prefill => unreachable!("prefills never run on the PIM"),
        }
    }

    fn start_token(&mut self, id: usize) {
        let cost = self.costs.tokens[self.step_of(id) - 1];
        self.tasks[id].start_ps = self.now;
        self.pim_bytes += cost.pim_weight_bytes;
        self.pim_job = Some(PimJob {
            task: id,
            phase: Phase::Fixed,
            seg_start: self.now,
            seg_instr: None,
        });
        self.generation += 1;
        let g = self.generation;
        self.push(self.now + cost.fixed_ps, Event::PimWake { generation: g });
    }

    /// Compute rate the PIM gets right now, in work units per picosecond.
    fn current_rate(&self) -> u64 {
        if self.mode == ExecMode::Lbim && self.proc_current.is_some() {
            1
        } else {
            2
        }
    }

    fn instruction_for(&mut self, rate: u64) -> InstructionKind {
        if rate == 2 {
            InstructionKind::PimMacFm
        } else {
            let k = self.next_half;
            self.next_half = match k {
                InstructionKind::MactLdb => InstructionKind::MacbLdt,
                _ => InstructionKind::MactLdb,
            };
            k
        }
    }

    fn set_instruction(&mut self, kind: InstructionKind) {
        if self.instr != Some(kind) {
            self.switches.push(ModeSwitch {
                time_ps: self.now,
                from: self.instr,
                to: kind,
            });
            self.instr = Some(kind);
        }
    }

    fn schedule_compute_end(&mut self, units_left: u64, rate: u64) {
        self.generation += 1;
        let g = self.generation;
        self.push(self.now + units_left.div_ceil(rate), Event::PimWake { generation: g });
    }

    fn pim_wake(&mut self) {
        let job = self.pim_job.as_ref().expect("wake without a PIM job");
        match job.phase {
            Phase::Fixed => {
                let units = 2 * self.costs.tokens[self.step_of(job.task) - 1].pim_full_ps;
                if units == 0 {
                    return self.finish_token();
                }
                let rate = self.current_rate();
                let kind = self.instruction_for(rate);
                self.set_instruction(kind);
                let job = self.pim_job.as_mut().expect("job checked above");
                job.phase = Phase::Compute {
                    units_left: units,
                    since: self.now,
                    rate,
                };
                job.seg_instr = Some(kind);
                self.schedule_compute_end(units, rate);
            }
            Phase::Compute { .. } => self.finish_token(),
        }
    }

    /// Re-evaluates the PIM instruction after the processor changed state.
    fn retune_pim(&mut self) {
        let rate = self.current_rate();
        let now = self.now;
        let Some(job) = self.pim_job.as_mut() else { return };
        let Phase::Compute {
            units_left,
            since,
            rate: old,
        } = job.phase
        else {
            return;
        };
        if old == rate {
            return;
        }
        let left = units_left.saturating_sub((now - since) * old);
        let (seg_start, seg_instr, task) = (job.seg_start, job.seg_instr, job.task);
        if now > seg_start {
            self.timeline.push(TimelineEntry {
                resource: Resource::Pim,
                start_ps: seg_start,
                end_ps: now,
                task,
                instruction: seg_instr,
            });
        }
        let kind = self.instruction_for(rate);
        self.set_instruction(kind);
        let job = self.pim_job.as_mut().expect("job checked above");
        job.seg_start = now;
        job.seg_instr = Some(kind);
        job.phase = Phase::Compute {
            units_left: left,
            since: now,
            rate,
        };
        self.schedule_compute_end(left, rate);
    }

    fn finish_token(&mut self) {
        let job = self.pim_job.take().expect("finish without a PIM job");
        if self.now > job.seg_start {
            self.timeline.push(TimelineEntry {
                resource: Resource::Pim,
                start_ps: job.seg_start,
                end_ps: self.now,
                task: job.task,
                instruction: job.seg_instr,
            });
        }
        self.tasks[job.task].end_ps = self.now;
        self.release(job.task);
    }

    fn into_report(self) -> LatencyReport {
        let batch = self.req.batch as usize;
        let lout = self.req.lout as usize;
        let secs = |ps: u64| ps as f64 / PS_PER_S;
        let requests = (0..batch)
            .map(|r| {
                let ttft = self.tasks[r].end_ps;
                let last = if lout == 0 { ttft } else { self.tasks[batch + r * lout + lout - 1].end_ps };
                RequestLatency {
                    request: r,
                    ttft_s: secs(ttft),
                    decode_s: secs(last - ttft),
                }
            })
            .collect();
        let end = self.tasks.iter().map(|t| t.end_ps).max().unwrap_or(0);
        let busy = |res: Resource| -> u64 {
            self.timeline
                .iter()
                .filter(|e| e.resource == res)
                .map(|e| e.end_ps - e.start_ps)
                .sum()
        };
        let mut timeline = self.timeline.clone();
        timeline.sort_by_key(|e| (e.resource, e.start_ps));
        LatencyReport {
            mode: self.mode,
            device: String::new(),
            model: String::new(),
            workload: self.req,
            requests,
            end_to_end_s: secs(end),
            end_to_end_ps: end,
            pim_busy_ps: busy(Resource::Pim),
            processor_busy_ps: busy(Resource::Processor),
            tasks: self.tasks,
            timeline,
            mode_switch_log: self.switches,
            pim_weight_bytes: self.pim_bytes,
        }
    }
}
