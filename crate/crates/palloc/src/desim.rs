//! Seeded discrete-event simulation of queue-length-based and
//! workload-based allocation policies.
//!
//! A run is fully determined by `(config, seed)`. One root seed is split
//! into named streams (inter-arrivals, service, routing choice, tie-breaks)
//! so variants can be compared under common random numbers. Per arrival the
//! engine consumes exactly one routing draw and one tie-break draw, in that
//! order, followed by one service draw where a job size or service time is
//! needed; this fixed discipline is what makes matched-seed path
//! comparisons across variants meaningful.

use crate::ctmc::{OrderedState, Variant};
use crate::error::{Error, Result};
use crate::policy::AllocationVector;
use crate::policy::SystemParams;
use crate::rng::{Stream, StreamId};

/// How arrivals pick a server.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    /// Route by queue length through an allocation vector over ranks.
    QueueBased(AllocationVector),
    /// Join the smallest workload with probability `1 - p`, the m-th
    /// smallest with probability `p`.
    WorkloadBased { m: usize, p: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: SystemParams,
    pub policy: PolicyKind,
    pub variant: Variant,
    pub horizon_arrivals: u64,
    pub seed: u64,
    /// Record a sample every `sample_stride` events.
    pub sample_stride: u64,
    /// Track split episodes against this front size (the `m` of the
    /// monitored split pattern), if set.
    pub split_monitor: Option<usize>,
    /// Resource guard on the sample buffer.
    pub max_samples: usize,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_arrivals < 1 {
            return Err(Error::invalid("horizon_arrivals must be at least 1"));
        }
        if self.sample_stride < 1 {
            return Err(Error::invalid("sample_stride must be at least 1"));
        }
        let s = self.params.servers();
        match &self.policy {
            PolicyKind::QueueBased(p) => {
                if p.servers() != s {
                    return Err(Error::invalid("allocation length must equal server count"));
                }
            }
            PolicyKind::WorkloadBased { m, p } => {
                if *m < 1 || *m > s {
                    return Err(Error::invalid("workload policy needs 1 <= m <= s"));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::invalid("workload policy needs p in [0, 1]"));
                }
            }
        }
        if let Some(m) = self.split_monitor {
            if m < 2 || m > s {
                return Err(Error::invalid("split monitor needs 2 <= m <= s"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub event_index: u64,
    pub time: f64,
    pub max_load: f64,
    pub total_load: f64,
    pub min_load: f64,
}

/// One maximal interval during which the ordered queue vector matched the
/// split pattern, beginning at the all-front-idle state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEpisode {
    pub start_time: f64,
    /// `None` when the run ended with the episode still open.
    pub end_time: Option<f64>,
    /// Arrivals routed to a back server after the regeneration point.
    pub overflow_count: u64,
    /// Time from the regeneration point (all front servers first
    /// simultaneously busy) to episode close.
    pub overflow_exposure_time: f64,
    /// Arrivals observed after the regeneration point.
    pub exposure_arrivals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: Vec<Sample>,
    /// Returns of the total load to zero.
    pub empty_visits: u64,
    pub empty_visit_times: Vec<f64>,
    pub split_episodes: Vec<SplitEpisode>,
    /// Busy-front-server count at post-regeneration arrival epochs,
    /// histogram over `0..=m-1`. Empty when no split monitor is set.
    pub front_busy_histogram: Vec<u64>,
    pub arrivals_processed: u64,
    pub final_time: f64,
    pub time_avg_total_load: f64,
}

/// True iff the first `m - 1` entries are 0 or 1 and the rest are at
/// least 2, so the system is split into front and back subsystems.
pub fn detect_split(state: &OrderedState, m: usize) -> bool {
    let q = state.queues();
    debug_assert!(m >= 2 && m <= q.len());
    q[..m - 1].iter().all(|&v| v <= 1) && q[m - 1..].iter().all(|&v| v >= 2)
}

/// Total overflow count over total post-regeneration exposure time.
pub fn measure_overflow_rate(report: &MetricsReport) -> Result<f64> {
    let exposure: f64 = report
        .split_episodes
        .iter()
        .map(|e| e.overflow_exposure_time)
        .sum();
    if exposure <= 0.0 {
        return Err(Error::UndefinedMeasurement(
            "no post-regeneration split exposure recorded".into(),
        ));
    }
    let count: u64 = report.split_episodes.iter().map(|e| e.overflow_count).sum();
    Ok(count as f64 / exposure)
}

struct SplitMonitor {
    m: usize,
    in_split: bool,
    open: Option<OpenEpisode>,
    episodes: Vec<SplitEpisode>,
    histogram: Vec<u64>,
}

struct OpenEpisode {
    start_time: f64,
    regen_time: Option<f64>,
    overflow_count: u64,
    exposure_arrivals: u64,
}

impl SplitMonitor {
    fn new(m: usize) -> Self {
        Self {
            m,
            in_split: false,
            open: None,
            episodes: Vec::new(),
            histogram: vec![0; m],
        }
    }

    /// Whether the run is currently inside an episode past regeneration.
    fn exposed(&self) -> bool {
        matches!(&self.open, Some(e) if e.regen_time.is_some())
    }

    /// Called at an arrival epoch, before the arrival is applied, with the
    /// queue length of the chosen server.
    fn observe_arrival(&mut self, sorted_queues: &[u32], chosen_queue_len: u32) {
        if !self.exposed() {
            return;
        }
        let busy_front = sorted_queues[..self.m - 1]
            .iter()
            .filter(|&&v| v == 1)
            .count();
        self.histogram[busy_front] += 1;
        let episode = self.open.as_mut().expect("exposed implies open");
        episode.exposure_arrivals += 1;
        if chosen_queue_len >= 2 {
            episode.overflow_count += 1;
        }
    }

    /// Called after every event with the updated sorted queue vector.
    fn after_event(&mut self, time: f64, sorted_queues: &[u32]) {
        let state = OrderedState::new(sorted_queues.to_vec()).expect("sorted");
        let now_split = detect_split(&state, self.m);
        if self.open.is_none() && now_split && !self.in_split {
            self.open = Some(OpenEpisode {
                start_time: time,
                regen_time: None,
                overflow_count: 0,
                exposure_arrivals: 0,
            });
        }
        if let Some(episode) = &mut self.open {
            if episode.regen_time.is_none()
                && sorted_queues[..self.m - 1].iter().all(|&v| v >= 1)
            {
                episode.regen_time = Some(time);
            }
            if !now_split {
                let closed = self.open.take().expect("checked");
                self.episodes.push(SplitEpisode {
                    start_time: closed.start_time,
                    end_time: Some(time),
                    overflow_count: closed.overflow_count,
                    overflow_exposure_time: closed
                        .regen_time
                        .map_or(0.0, |r| time - r),
                    exposure_arrivals: closed.exposure_arrivals,
                });
            }
        }
        self.in_split = now_split;
    }

    fn finish(mut self, final_time: f64) -> (Vec<SplitEpisode>, Vec<u64>) {
        if let Some(open) = self.open.take() {
            self.episodes.push(SplitEpisode {
                start_time: open.start_time,
                end_time: None,
                overflow_count: open.overflow_count,
                overflow_exposure_time: open
                    .regen_time
                    .map_or(0.0, |r| final_time - r),
                exposure_arrivals: open.exposure_arrivals,
            });
        }
        (self.episodes, self.histogram)
    }
}

struct Collector {
    stride: u64,
    max_samples: usize,
    samples: Vec<Sample>,
    empty_visits: u64,
    empty_visit_times: Vec<f64>,
    load_integral: f64,
}

impl Collector {
    fn new(stride: u64, max_samples: usize) -> Self {
        Self {
            stride,
            max_samples,
            samples: Vec::new(),
            empty_visits: 0,
            empty_visit_times: Vec::new(),
            load_integral: 0.0,
        }
    }

    fn sample(
        &mut self,
        event_index: u64,
        time: f64,
        max_load: f64,
        total_load: f64,
        min_load: f64,
    ) -> Result<()> {
        if event_index % self.stride != 0 {
            return Ok(());
        }
        if self.samples.len() >= self.max_samples {
            return Err(Error::invalid(format!(
                "sample buffer limit of {} exceeded; raise max_samples or sample_stride",
                self.max_samples
            )));
        }
        self.samples.push(Sample {
            event_index,
            time,
            max_load,
            total_load,
            min_load,
        });
        Ok(())
    }
}

/// Picks a server for an arrival given queue-rank loads.
///
/// `sorted` holds server ids ordered by load. Consumes one routing draw and
/// one tie-break draw regardless of branch, so matched seeds stay aligned
/// across variants.
fn pick_by_rank<L: PartialEq + Copy>(
    sorted: &[usize],
    load_of: impl Fn(usize) -> L,
    rank: usize,
    tie: &mut Stream,
) -> usize {
    let target = load_of(sorted[rank]);
    let mut j = rank;
    while j > 0 && load_of(sorted[j - 1]) == target {
        j -= 1;
    }
    let mut k = rank;
    while k + 1 < sorted.len() && load_of(sorted[k + 1]) == target {
        k += 1;
    }
    sorted[j + tie.index(k - j + 1)]
}

pub fn simulate(config: &SimConfig) -> Result<MetricsReport> {
    config.validate()?;
    match &config.policy {
        PolicyKind::QueueBased(p) => simulate_queue_based(config, p),
        PolicyKind::WorkloadBased { m, p } => simulate_workload_based(config, *m, *p),
    }
}

fn sample_rank(p: &AllocationVector, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in p.probs().iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.servers() - 1
}

fn simulate_queue_based(config: &SimConfig, p: &AllocationVector) -> Result<MetricsReport> {
    let s = config.params.servers();
    let (lambda, mu) = (config.params.lambda(), config.params.mu());
    let mut arrivals_rng = Stream::new(config.seed, StreamId::InterArrival);
    let mut service = Stream::new(config.seed, StreamId::Service);
    let mut routing = Stream::new(config.seed, StreamId::Routing);
    let mut tie = Stream::new(config.seed, StreamId::TieBreak);

    let mut queues = vec![0u32; s];
    let mut completion = vec![f64::INFINITY; s];
    let mut total_jobs: u64 = 0;
    let mut time = 0.0;
    let mut next_arrival = arrivals_rng.exp(lambda);
    let mut arrivals: u64 = 0;
    let mut event_index: u64 = 0;

    let mut collector = Collector::new(config.sample_stride, config.max_samples);
    let mut monitor = config.split_monitor.map(SplitMonitor::new);
    let mut sorted_scratch: Vec<u32> = vec![0; s];

    collector.sample(0, 0.0, 0.0, 0.0, 0.0)?;

    while arrivals < config.horizon_arrivals {
        let next_completion = completion
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let is_arrival = next_arrival <= next_completion;
        let event_time = if is_arrival { next_arrival } else { next_completion };
        collector.load_integral += total_jobs as f64 * (event_time - time);
        time = event_time;

        if is_arrival {
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_by_key(|&i| (queues[i], i));
            let u = routing.uniform();
            let chosen = if config.variant == Variant::NonIdling && queues[order[0]] == 0 {
                // Idle servers form the minimum tie group; the routing draw
                // is consumed above to keep streams aligned.
                pick_by_rank(&order, |i| queues[i], 0, &mut tie)
            } else {
                let rank = sample_rank(p, u);
                pick_by_rank(&order, |i| queues[i], rank, &mut tie)
            };
            if let Some(monitor) = &mut monitor {
                for (slot, &i) in sorted_scratch.iter_mut().zip(order.iter()) {
                    *slot = queues[i];
                }
                monitor.observe_arrival(&sorted_scratch, queues[chosen]);
            }
            if queues[chosen] == 0 {
                completion[chosen] = time + service.exp(mu);
            }
            queues[chosen] += 1;
            total_jobs += 1;
            arrivals += 1;
            next_arrival = time + arrivals_rng.exp(lambda);
        } else {
            let i = completion
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("non-empty");
            queues[i] -= 1;
            total_jobs -= 1;
            completion[i] = if queues[i] > 0 {
                time + service.exp(mu)
            } else {
                f64::INFINITY
            };
            if total_jobs == 0 {
                collector.empty_visits += 1;
                collector.empty_visit_times.push(time);
            }
        }

        event_index += 1;
        let max_q = *queues.iter().max().expect("non-empty") as f64;
        let min_q = *queues.iter().min().expect("non-empty") as f64;
        collector.sample(event_index, time, max_q, total_jobs as f64, min_q)?;
        if let Some(monitor) = &mut monitor {
            sorted_scratch.copy_from_slice(&queues);
            sorted_scratch.sort_unstable();
            monitor.after_event(time, &sorted_scratch);
        }
    }

    let (split_episodes, front_busy_histogram) = match monitor {
        Some(m) => m.finish(time),
        None => (Vec::new(), Vec::new()),
    };
    Ok(MetricsReport {
        samples: collector.samples,
        empty_visits: collector.empty_visits,
        empty_visit_times: collector.empty_visit_times,
        split_episodes,
        front_busy_histogram,
        arrivals_processed: arrivals,
        final_time: time,
        time_avg_total_load: if time > 0.0 {
            collector.load_integral / time
        } else {
            0.0
        },
    })
}

struct WorkloadServer {
    /// Completion time of the job in service, infinity when idle.
    completion: f64,
    /// Sizes of jobs waiting behind the one in service.
    pending: std::collections::VecDeque<f64>,
    pending_sum: f64,
}

impl WorkloadServer {
    fn workload(&self, now: f64) -> f64 {
        let head = if self.completion.is_finite() {
            (self.completion - now).max(0.0)
        } else {
            0.0
        };
        head + self.pending_sum
    }

    fn jobs(&self) -> u32 {
        u32::from(self.completion.is_finite()) + self.pending.len() as u32
    }
}

fn simulate_workload_based(config: &SimConfig, m: usize, p_err: f64) -> Result<MetricsReport> {
    let s = config.params.servers();
    let (lambda, mu) = (config.params.lambda(), config.params.mu());
    let mut arrivals_rng = Stream::new(config.seed, StreamId::InterArrival);
    let mut service = Stream::new(config.seed, StreamId::Service);
    let mut routing = Stream::new(config.seed, StreamId::Routing);
    let mut tie = Stream::new(config.seed, StreamId::TieBreak);

    let mut servers: Vec<WorkloadServer> = (0..s)
        .map(|_| WorkloadServer {
            completion: f64::INFINITY,
            pending: std::collections::VecDeque::new(),
            pending_sum: 0.0,
        })
        .collect();
    let mut total_jobs: u64 = 0;
    let mut time = 0.0;
    let mut next_arrival = arrivals_rng.exp(lambda);
    let mut arrivals: u64 = 0;
    let mut event_index: u64 = 0;

    let mut collector = Collector::new(config.sample_stride, config.max_samples);
    let mut monitor = config.split_monitor.map(SplitMonitor::new);

    collector.sample(0, 0.0, 0.0, 0.0, 0.0)?;

    while arrivals < config.horizon_arrivals {
        let next_completion = servers
            .iter()
            .map(|sv| sv.completion)
            .fold(f64::INFINITY, f64::min);
        let is_arrival = next_arrival <= next_completion;
        let event_time = if is_arrival { next_arrival } else { next_completion };
        // Total workload decays linearly between events: no busy server can
        // run dry mid-interval, since that would itself be an event.
        let dt = event_time - time;
        let total_before: f64 = servers.iter().map(|sv| sv.workload(time)).sum();
        let busy = servers.iter().filter(|sv| sv.completion.is_finite()).count() as f64;
        collector.load_integral += total_before * dt - 0.5 * busy * dt * dt;
        time = event_time;

        if is_arrival {
            let loads: Vec<f64> = servers.iter().map(|sv| sv.workload(time)).collect();
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_by(|&a, &b| {
                loads[a]
                    .partial_cmp(&loads[b])
                    .expect("finite")
                    .then(a.cmp(&b))
            });
            let u = routing.uniform();
            let idle: Vec<usize> = (0..s).filter(|&i| servers[i].jobs() == 0).collect();
            let chosen = if config.variant == Variant::NonIdling && !idle.is_empty() {
                idle[tie.index(idle.len())]
            } else {
                let rank = if u < p_err { m - 1 } else { 0 };
                pick_by_rank(&order, |i| loads[i], rank, &mut tie)
            };
            if let Some(monitor) = &mut monitor {
                let mut sorted: Vec<u32> = order.iter().map(|&i| servers[i].jobs()).collect();
                sorted.sort_unstable();
                monitor.observe_arrival(&sorted, servers[chosen].jobs());
            }
            let size = service.exp(mu);
            let server = &mut servers[chosen];
            if server.completion.is_finite() {
                server.pending.push_back(size);
                server.pending_sum += size;
            } else {
                server.completion = time + size;
            }
            total_jobs += 1;
            arrivals += 1;
            next_arrival = time + arrivals_rng.exp(lambda);
        } else {
            let i = servers
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.completion.partial_cmp(&b.1.completion).expect("finite"))
                .map(|(i, _)| i)
                .expect("non-empty");
            let server = &mut servers[i];
            match server.pending.pop_front() {
                Some(size) => {
                    server.pending_sum -= size;
                    // Keep idle-server workloads exactly zero despite float
                    // cancellation in the running sum.
                    if server.pending.is_empty() {
                        server.pending_sum = 0.0;
                    }
                    server.completion = time + size;
                }
                None => server.completion = f64::INFINITY,
            }
            total_jobs -= 1;
            if total_jobs == 0 {
                collector.empty_visits += 1;
                collector.empty_visit_times.push(time);
            }
        }

        event_index += 1;
        let loads: Vec<f64> = servers.iter().map(|sv| sv.workload(time)).collect();
        let max_w = loads.iter().cloned().fold(0.0f64, f64::max);
        let min_w = loads.iter().cloned().fold(f64::INFINITY, f64::min);
        let total_w: f64 = loads.iter().sum();
        collector.sample(event_index, time, max_w, total_w, min_w)?;
        if let Some(monitor) = &mut monitor {
            let mut sorted: Vec<u32> = servers.iter().map(|sv| sv.jobs()).collect();
            sorted.sort_unstable();
            monitor.after_event(time, &sorted);
        }
    }

    let (split_episodes, front_busy_histogram) = match monitor {
        Some(mon) => mon.finish(time),
        None => (Vec::new(), Vec::new()),
    };
    Ok(MetricsReport {
        samples: collector.samples,
        empty_visits: collector.empty_visits,
        empty_visit_times: collector.empty_visit_times,
        split_episodes,
        front_busy_histogram,
        arrivals_processed: arrivals,
        final_time: time,
        time_avg_total_load: if time > 0.0 {
            collector.load_integral / time
        } else {
            0.0
        },
    })
}

/// Writes the sample path as delimited text with a provenance comment line.
pub fn write_sample_path_csv<W: std::io::Write>(
    w: &mut W,
    report: &MetricsReport,
    header_comment: &str,
) -> std::io::Result<()> {
    writeln!(w, "# {header_comment}")?;
    writeln!(w, "event_index,time,max_load,total_load,min_load")?;
    for s in &report.samples {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9}",
            s.event_index, s.time, s.max_load, s.total_load, s.min_load
        )?;
    }
    Ok(())
}
