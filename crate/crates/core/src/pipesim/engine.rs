use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use super::cost::{allreduce_time, embedding_sync_time};
use super::{CostModel, EmbSyncOrder, EventId, EventKind, ParallelConfig, ScheduleEvent, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

/// Compute order of one stage under non-interleaved 1F1B: `min(P−s, M)`
/// warm-up forwards, then one backward followed by one forward until the
/// forwards run out, then the remaining backwards.
pub fn one_f_one_b_order(stage: usize, stages: usize, microbatches: usize) -> Vec<(Pass, usize)> {
    let warmup = (stages - stage).min(microbatches);
    let mut order: Vec<(Pass, usize)> = (0..warmup).map(|i| (Pass::Forward, i)).collect();
    for i in 0..microbatches {
        order.push((Pass::Backward, i));
        if warmup + i < microbatches {
            order.push((Pass::Forward, warmup + i));
        }
    }
    order
}

/// Everything a policy decides before scheduling.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Plan {
    /// Backward sends `(sender stage, micro-batch)` that are compressed.
    pub compressed_bwd: BTreeSet<(usize, usize)>,
    /// Stages whose data-parallel all-reduce is compressed.
    pub dp_compressed: BTreeSet<usize>,
    pub fused_embedding: bool,
    pub emb_order: EmbSyncOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Resource {
    Lane(usize),
    /// Stage `s` to `s + 1`.
    FwdLink(usize),
    /// Stage `s` to `s − 1`.
    BwdLink(usize),
    Dp(usize),
    Emb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Fwd(usize, usize),
    Bwd(usize, usize),
    SendFwd(usize, usize),
    SendBwd(usize, usize),
    Compress(usize, usize),
    Decompress(usize, usize),
    Dp(usize),
    Emb,
}

struct Task {
    kind: EventKind,
    device: usize,
    peer: Option<usize>,
    microbatch: Option<usize>,
    duration: f64,
    resource: Resource,
    deps: Vec<EventId>,
    compressed: bool,
}

struct Graph {
    tasks: Vec<Task>,
    by_key: HashMap<Key, EventId>,
    queues: HashMap<Resource, VecDeque<EventId>>,
    /// Resources in creation order, for deterministic start attempts.
    resources: Vec<Resource>,
}

impl Graph {
    fn new() -> Self {
        Self {
            tasks: Vec::new(),
            by_key: HashMap::new(),
            queues: HashMap::new(),
            resources: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        key: Key,
        kind: EventKind,
        device: usize,
        peer: Option<usize>,
        microbatch: Option<usize>,
        duration: f64,
        resource: Resource,
        compressed: bool,
    ) -> EventId {
        let id = self.tasks.len();
        self.tasks.push(Task {
            kind,
            device,
            peer,
            microbatch,
            duration,
            resource,
            deps: Vec::new(),
            compressed,
        });
        self.by_key.insert(key, id);
        let queue = self.queues.entry(resource).or_insert_with(|| {
            self.resources.push(resource);
            VecDeque::new()
        });
        queue.push_back(id);
        id
    }

    fn id(&self, key: Key) -> EventId {
        self.by_key[&key]
    }

    fn depend(&mut self, task: Key, on: Key) {
        let (t, d) = (self.id(task), self.id(on));
        self.tasks[t].deps.push(d);
    }
}

fn build_graph(config: &ParallelConfig, cost: &CostModel, plan: &Plan) -> Graph {
    let p = config.pipeline_stages;
    let m = config.microbatches;
    let bw = cost.inter_node_bandwidth;
    let act = cost.activation_volume;
    let compress_time = cost.compress_throughput.map_or(0.0, |t| act / t);
    let decompress_time = cost.decompress_throughput.map_or(0.0, |t| act / t);
    let is_compressed = |sender: usize, mb: usize| plan.compressed_bwd.contains(&(sender, mb));

    let mut g = Graph::new();

    // Compute lanes, in 1F1B order, with decompress/compress wrapped around
    // each backward whose incoming/outgoing gradient is compressed.
    for s in 0..p {
        for (pass, i) in one_f_one_b_order(s, p, m) {
            match pass {
                Pass::Forward => {
                    g.add(
                        Key::Fwd(s, i),
                        EventKind::Fwd,
                        s,
                        None,
                        Some(i),
                        cost.fwd_time,
                        Resource::Lane(s),
                        false,
                    );
                }
                Pass::Backward => {
                    if s + 1 < p && is_compressed(s + 1, i) {
                        g.add(
                            Key::Decompress(s, i),
                            EventKind::Decompress,
                            s,
                            None,
                            Some(i),
                            decompress_time,
                            Resource::Lane(s),
                            true,
                        );
                    }
                    g.add(
                        Key::Bwd(s, i),
                        EventKind::Bwd,
                        s,
                        None,
                        Some(i),
                        cost.bwd(),
                        Resource::Lane(s),
                        false,
                    );
                    if s > 0 && is_compressed(s, i) {
                        g.add(
                            Key::Compress(s, i),
                            EventKind::Compress,
                            s,
                            None,
                            Some(i),
                            compress_time,
                            Resource::Lane(s),
                            true,
                        );
                    }
                }
            }
        }
    }

    // Point-to-point channels carry micro-batches in order.
    for s in 0..p.saturating_sub(1) {
        for i in 0..m {
            g.add(
                Key::SendFwd(s, i),
                EventKind::P2pFwd,
                s,
                Some(s + 1),
                Some(i),
                act / bw,
                Resource::FwdLink(s),
                false,
            );
        }
    }
    for s in 1..p {
        for i in 0..m {
            let c = is_compressed(s, i);
            let volume = if c { act / cost.compression_ratio_cb } else { act };
            g.add(
                Key::SendBwd(s, i),
                EventKind::P2pBwd,
                s,
                Some(s - 1),
                Some(i),
                volume / bw,
                Resource::BwdLink(s),
                c,
            );
        }
    }

    for s in 0..p {
        let c = plan.dp_compressed.contains(&s);
        let volume = if c {
            cost.grad_volume_per_stage / cost.compression_ratio_dp
        } else {
            cost.grad_volume_per_stage
        };
        g.add(
            Key::Dp(s),
            EventKind::DpAllreduce,
            s,
            None,
            None,
            allreduce_time(volume, config.data_ways, bw),
            Resource::Dp(s),
            c,
        );
    }

    let emb_time = if p == 1 {
        // Both uses of the table live on one device; only the data-parallel
        // reduction remains.
        allreduce_time(cost.embedding_volume, config.data_ways, bw)
    } else {
        embedding_sync_time(cost.embedding_volume, config.data_ways, bw, plan.fused_embedding)
    };
    g.add(
        Key::Emb,
        EventKind::EmbSync,
        0,
        if p > 1 { Some(p - 1) } else { None },
        None,
        emb_time,
        Resource::Emb,
        false,
    );

    // Data dependencies.
    for s in 0..p {
        for i in 0..m {
            if s > 0 {
                g.depend(Key::Fwd(s, i), Key::SendFwd(s - 1, i));
            }
            if s + 1 < p {
                g.depend(Key::SendFwd(s, i), Key::Fwd(s, i));
                if is_compressed(s + 1, i) {
                    g.depend(Key::Decompress(s, i), Key::SendBwd(s + 1, i));
                    g.depend(Key::Bwd(s, i), Key::Decompress(s, i));
                } else {
                    g.depend(Key::Bwd(s, i), Key::SendBwd(s + 1, i));
                }
            } else {
                g.depend(Key::Bwd(s, i), Key::Fwd(s, i));
            }
            if s > 0 {
                if is_compressed(s, i) {
                    g.depend(Key::Compress(s, i), Key::Bwd(s, i));
                    g.depend(Key::SendBwd(s, i), Key::Compress(s, i));
                } else {
                    g.depend(Key::SendBwd(s, i), Key::Bwd(s, i));
                }
            }
        }
        g.depend(Key::Dp(s), Key::Bwd(s, m - 1));
    }
    match plan.emb_order {
        EmbSyncOrder::AfterDp => {
            g.depend(Key::Emb, Key::Dp(0));
            if p > 1 {
                g.depend(Key::Emb, Key::Dp(p - 1));
            }
        }
        EmbSyncOrder::Overlap => {
            g.depend(Key::Emb, Key::Bwd(0, m - 1));
            if p > 1 {
                g.depend(Key::Emb, Key::Bwd(p - 1, m - 1));
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Completion {
    time: f64,
    seq: u64,
    id: EventId,
}

impl Eq for Completion {}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Executor<'g> {
    graph: &'g Graph,
    queues: HashMap<Resource, VecDeque<EventId>>,
    busy: HashMap<Resource, bool>,
    waiting_on: Vec<usize>,
    dependents: Vec<Vec<EventId>>,
    start: Vec<f64>,
    end: Vec<f64>,
    heap: BinaryHeap<Reverse<Completion>>,
    seq: u64,
}

impl<'g> Executor<'g> {
    fn new(graph: &'g Graph) -> Self {
        let n = graph.tasks.len();
        let mut dependents = vec![Vec::new(); n];
        for (id, t) in graph.tasks.iter().enumerate() {
            for &d in &t.deps {
                dependents[d].push(id);
            }
        }
        Self {
            graph,
            queues: graph.queues.clone(),
            busy: graph.resources.iter().map(|&r| (r, false)).collect(),
            waiting_on: graph.tasks.iter().map(|t| t.deps.len()).collect(),
            dependents,
            start: vec![f64::NAN; n],
            end: vec![f64::NAN; n],
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    fn try_start(&mut self, res: Resource, now: f64) {
        if self.busy[&res] {
            return;
        }
        let Some(&head) = self.queues[&res].front() else {
            return;
        };
        if self.waiting_on[head] > 0 {
            return;
        }
        self.queues.get_mut(&res).expect("known resource").pop_front();
        self.busy.insert(res, true);
        let finish = now + self.graph.tasks[head].duration;
        self.start[head] = now;
        self.end[head] = finish;
        self.seq += 1;
        self.heap.push(Reverse(Completion {
            time: finish,
            seq: self.seq,
            id: head,
        }));
    }

    fn run(mut self) -> (Vec<f64>, Vec<f64>) {
        for r in self.graph.resources.clone() {
            self.try_start(r, 0.0);
        }
        let mut finished = 0;
        while let Some(Reverse(done)) = self.heap.pop() {
            finished += 1;
            let res = self.graph.tasks[done.id].resource;
            self.busy.insert(res, false);
            let mut touched = vec![res];
            for &d in &self.dependents[done.id] {
                self.waiting_on[d] -= 1;
                if self.waiting_on[d] == 0 {
                    touched.push(self.graph.tasks[d].resource);
                }
            }
            for r in touched {
                self.try_start(r, done.time);
            }
        }
        assert_eq!(
            finished,
            self.graph.tasks.len(),
            "schedule deadlocked; the static task order is inconsistent"
        );
        (self.start, self.end)
    }
}

/// Builds and executes the task graph for one iteration.
pub(crate) fn schedule(config: &ParallelConfig, cost: &CostModel, plan: &Plan) -> Timeline {
    let graph = build_graph(config, cost, plan);
    let (start, end) = Executor::new(&graph).run();

    // Each event also records the event before it on its lane or channel.
    let mut prev_on: HashMap<Resource, EventId> = HashMap::new();
    let mut order: Vec<EventId> = (0..graph.tasks.len()).collect();
    order.sort_by(|&a, &b| start[a].total_cmp(&start[b]).then(a.cmp(&b)));
    let mut resource_pred: Vec<Option<EventId>> = vec![None; graph.tasks.len()];
    for &id in &order {
        let r = graph.tasks[id].resource;
        resource_pred[id] = prev_on.insert(r, id);
    }

    let events: Vec<ScheduleEvent> = graph
        .tasks
        .iter()
        .enumerate()
        .map(|(id, t)| {
            let mut predecessors = t.deps.clone();
            if let Some(p) = resource_pred[id] {
                if !predecessors.contains(&p) {
                    predecessors.push(p);
                }
            }
            predecessors.sort_unstable();
            ScheduleEvent {
                id,
                device: t.device,
                peer: t.peer,
                kind: t.kind,
                microbatch: t.microbatch,
                start: start[id],
                end: end[id],
                predecessors,
                compressed: t.compressed,
            }
        })
        .collect();
    let makespan = events.iter().fold(0.0_f64, |m, e| m.max(e.end));
    Timeline { events, makespan }
}
