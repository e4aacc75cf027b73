//! Endpoints, the lockstep driver and trace generation.
//!
//! Endpoint A is the traffic authority: it moves vehicles and decides on
//! resynchronization. Endpoint B follows A's speeds with its own integration,
//! assigns terrain elevation and, on RESYNC, snaps to A's horizontal position.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{Connection, Framing, Message, PROTOCOL_VERSION};
use super::routes::{Route, RoutePath};
use super::transport::{memory_pipe, Transport};
use super::{sync_error, CosimError, Fault, LockstepClock, RoadSurface, SyncAction, SyncConfig, SyncEvent, VehicleState};
use crate::builder::RoadNetwork3D;

struct TrafficVehicle {
    path: RoutePath,
    s: f64,
    arrived: bool,
}

/// Endpoint A: constant-speed route followers with optional seeded noise.
struct TrafficEndpoint<'a> {
    surface: &'a RoadSurface<'a>,
    vehicles: Vec<TrafficVehicle>,
    rng: ChaCha8Rng,
    noise: f64,
    dt: f64,
    arrived: usize,
}

impl<'a> TrafficEndpoint<'a> {
    fn new(surface: &'a RoadSurface<'a>, paths: &[RoutePath], config: &SyncConfig) -> Self {
        Self {
            surface,
            vehicles: paths.iter().map(|p| TrafficVehicle { path: p.clone(), s: 0.0, arrived: false }).collect(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            noise: config.speed_noise,
            dt: config.dt,
            arrived: 0,
        }
    }

    fn advance(&mut self) -> Result<Vec<VehicleState>, CosimError> {
        self.vehicles.retain(|v| !v.arrived);
        let mut states = Vec::with_capacity(self.vehicles.len());
        for v in &mut self.vehicles {
            let speed = if self.noise > 0.0 {
                v.path.speed * (1.0 + self.noise * self.rng.gen_range(-1.0..1.0))
            } else {
                v.path.speed
            };
            v.s = (v.s + speed * self.dt).min(v.path.length());
            if v.s >= v.path.length() {
                v.arrived = true;
                self.arrived += 1;
            }
            let (p, heading) = v.path.position(v.s);
            let z = self.surface.elevation(p.x, p.y)?;
            states.push(VehicleState { vehicle_id: v.path.vehicle_id.clone(), x: p.x, y: p.y, z, speed, heading });
        }
        Ok(states)
    }
}

struct TerrainVehicle {
    s: f64,
    offset_x: f64,
    offset_y: f64,
    heading: f64,
    speed: f64,
}

/// Endpoint B: integrates arc length from A's reported speeds, adds any
/// injected drift or fault, and assigns z from the road surface.
struct TerrainEndpoint<'a> {
    surface: &'a RoadSurface<'a>,
    paths: BTreeMap<String, RoutePath>,
    vehicles: BTreeMap<String, TerrainVehicle>,
    first_vehicle: Option<String>,
    drift: f64,
    fault: Option<Fault>,
    clock: LockstepClock,
}

impl<'a> TerrainEndpoint<'a> {
    fn state(&self, id: &str, v: &TerrainVehicle, x: f64, y: f64) -> Result<VehicleState, CosimError> {
        let z = self.surface.elevation(x, y)?;
        Ok(VehicleState { vehicle_id: id.to_string(), x, y, z, speed: v.speed, heading: v.heading })
    }

    fn on_states(&mut self, n: u64, a_states: &[VehicleState]) -> Result<Vec<VehicleState>, CosimError> {
        let dt = self.clock.dt;
        self.vehicles.retain(|id, _| a_states.iter().any(|a| &a.vehicle_id == id));
        let mut out = Vec::with_capacity(a_states.len());
        for a in a_states {
            let path = self
                .paths
                .get(&a.vehicle_id)
                .ok_or_else(|| CosimError::Protocol(format!("unknown vehicle {}", a.vehicle_id)))?;
            let v = self.vehicles.entry(a.vehicle_id.clone()).or_insert(TerrainVehicle {
                s: 0.0,
                offset_x: 0.0,
                offset_y: 0.0,
                heading: 0.0,
                speed: 0.0,
            });
            v.speed = a.speed;
            v.s = (v.s + a.speed * dt).min(path.length());
            v.offset_x += self.drift;
            if let Some(f) = self.fault {
                if f.step == n && self.first_vehicle.as_deref() == Some(a.vehicle_id.as_str()) {
                    v.offset_x += f.offset;
                }
            }
            let (p, heading) = path.position(v.s);
            v.heading = heading;
            let (x, y) = (p.x + v.offset_x, p.y + v.offset_y);
            let v = &self.vehicles[&a.vehicle_id];
            out.push(self.state(&a.vehicle_id, v, x, y)?);
        }
        Ok(out)
    }

    fn on_resync(&mut self, id: &str, x: f64, y: f64) -> Result<VehicleState, CosimError> {
        let path = self.paths.get(id).ok_or_else(|| CosimError::Protocol(format!("unknown vehicle {id}")))?;
        let s = path.project(x, y);
        let v = self
            .vehicles
            .get_mut(id)
            .ok_or_else(|| CosimError::Protocol(format!("RESYNC for inactive vehicle {id}")))?;
        v.s = s;
        v.offset_x = 0.0;
        v.offset_y = 0.0;
        let v = &self.vehicles[id];
        self.state(id, v, x, y)
    }

    fn serve<R: Read, W: Write>(&mut self, conn: &mut Connection<R, W>) -> Result<(), CosimError> {
        conn.accept(self.clock.dt)?;
        loop {
            match conn.recv()? {
                Message::Step { n } => {
                    if n != self.clock.n + 1 {
                        return Err(CosimError::ClockMismatch { expected: self.clock.n + 1, got: n });
                    }
                    self.clock.advance();
                }
                Message::States { n, states } => {
                    if n != self.clock.n {
                        return Err(CosimError::ClockMismatch { expected: self.clock.n, got: n });
                    }
                    let reply = self.on_states(n, &states)?;
                    conn.send(&Message::States { n: self.clock.n, states: reply })?;
                }
                Message::Resync { n, vehicle_id, x, y } => {
                    if n != self.clock.n {
                        return Err(CosimError::ClockMismatch { expected: self.clock.n, got: n });
                    }
                    let state = self.on_resync(&vehicle_id, x, y)?;
                    conn.send(&Message::States { n: self.clock.n, states: vec![state] })?;
                }
                Message::Bye => {
                    conn.send(&Message::Bye)?;
                    return Ok(());
                }
                Message::Hello { .. } => return Err(CosimError::Protocol("unexpected HELLO".into())),
            }
        }
    }
}

/// One line of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceRecord {
    Header {
        protocol_version: u32,
        dt: f64,
        resync_threshold: f64,
        snap_distance: f64,
        /// Which endpoint wins on resync.
        authority: String,
        resync_action: String,
        framing: Framing,
        transport: Transport,
        seed: u64,
        drift_per_step: f64,
        speed_noise: f64,
        fault: Option<Fault>,
        vehicles: usize,
    },
    Clock {
        n: u64,
        t_a: f64,
        t_b: f64,
    },
    Vehicle {
        n: u64,
        t: f64,
        vehicle_id: String,
        a: VehicleState,
        /// B's state after any resync.
        b: VehicleState,
        /// Measured before any resync.
        sync_error: f64,
        action: SyncAction,
        post_sync_error: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub n: u64,
    pub t_a: f64,
    pub t_b: f64,
    pub records: Vec<TraceRecord>,
    pub events: Vec<SyncEvent>,
}

/// Endpoint A's side of the lockstep loop.
pub struct Lockstep<'a, R: Read, W: Write> {
    conn: Connection<R, W>,
    traffic: TrafficEndpoint<'a>,
    clock: LockstepClock,
    threshold: f64,
}

impl<'a, R: Read, W: Write> Lockstep<'a, R, W> {
    fn expect_states(&mut self, n: u64) -> Result<Vec<VehicleState>, CosimError> {
        match self.conn.recv()? {
            Message::States { n: nb, states } if nb == n => Ok(states),
            Message::States { n: nb, .. } => Err(CosimError::ClockMismatch { expected: n, got: nb }),
            other => Err(CosimError::Protocol(format!("expected STATES, got {}", other.kind()))),
        }
    }

    /// Advances both endpoints by one step and applies the resync rule.
    pub fn step(&mut self) -> Result<StepOutcome, CosimError> {
        self.clock.advance();
        let n = self.clock.n;
        let a_states = self.traffic.advance()?;
        self.conn.send(&Message::Step { n })?;
        self.conn.send(&Message::States { n, states: a_states.clone() })?;
        let b_states = self.expect_states(n)?;
        if b_states.len() != a_states.len() {
            return Err(CosimError::Protocol(format!("{} states sent, {} returned", a_states.len(), b_states.len())));
        }
        let t_a = self.clock.t();
        // B echoed n, so its derived clock is n * dt as well
        let t_b = LockstepClock { n, dt: self.clock.dt }.t();
        let mut records = vec![TraceRecord::Clock { n, t_a, t_b }];
        let mut events = Vec::new();
        for (a, b) in a_states.into_iter().zip(b_states) {
            let err = sync_error(&a, &b)?;
            let (action, b, post) = if err > self.threshold {
                self.conn.send(&Message::Resync { n, vehicle_id: a.vehicle_id.clone(), x: a.x, y: a.y })?;
                let mut ack = self.expect_states(n)?;
                if ack.len() != 1 {
                    return Err(CosimError::Protocol("RESYNC must be acknowledged with one state".into()));
                }
                let b2 = ack.remove(0);
                let post = sync_error(&a, &b2)?;
                (SyncAction::Resync, b2, post)
            } else {
                (SyncAction::None, b, err)
            };
            events.push(SyncEvent { step: n, vehicle_id: a.vehicle_id.clone(), sync_error: err, action });
            records.push(TraceRecord::Vehicle {
                n,
                t: t_a,
                vehicle_id: a.vehicle_id.clone(),
                a,
                b,
                sync_error: err,
                action,
                post_sync_error: post,
            });
        }
        Ok(StepOutcome { n, t_a, t_b, records, events })
    }

    pub fn finish(mut self) -> Result<(), CosimError> {
        self.conn.send(&Message::Bye)?;
        match self.conn.recv()? {
            Message::Bye => Ok(()),
            other => Err(CosimError::Protocol(format!("expected BYE, got {}", other.kind()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosimSummary {
    pub steps: u64,
    pub final_t_a: f64,
    pub final_t_b: f64,
    pub clocks_equal: bool,
    pub clock_records: usize,
    pub vehicle_records: usize,
    pub vehicles: usize,
    pub vehicles_arrived: usize,
    pub resync_count: usize,
    pub resync_events: Vec<SyncEvent>,
    pub max_sync_error: f64,
    pub max_post_sync_error: f64,
    pub transport: Transport,
    pub framing: Framing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    /// JSON lines: header, then per step a clock record and one record per vehicle.
    pub trace: String,
    pub summary: CosimSummary,
    pub events: Vec<SyncEvent>,
}

fn push_line(trace: &mut String, record: &TraceRecord) {
    trace.push_str(&serde_json::to_string(record).expect("trace records serialise"));
    trace.push('\n');
}

fn drive<R: Read, W: Write>(
    conn: Connection<R, W>,
    surface: &RoadSurface<'_>,
    paths: &[RoutePath],
    config: &SyncConfig,
    transport: Transport,
) -> Result<ScenarioOutcome, CosimError> {
    let mut conn = conn;
    conn.hello(config.dt, config.framing)?;
    let mut lockstep = Lockstep {
        conn,
        traffic: TrafficEndpoint::new(surface, paths, config),
        clock: LockstepClock::new(config.dt),
        threshold: config.resync_threshold,
    };
    let mut trace = String::new();
    push_line(
        &mut trace,
        &TraceRecord::Header {
            protocol_version: PROTOCOL_VERSION,
            dt: config.dt,
            resync_threshold: config.resync_threshold,
            snap_distance: config.snap_distance,
            authority: "A (traffic endpoint)".into(),
            resync_action: "B snaps x,y to A and recomputes z".into(),
            framing: config.framing,
            transport,
            seed: config.seed,
            drift_per_step: config.drift_per_step,
            speed_noise: config.speed_noise,
            fault: config.fault,
            vehicles: paths.len(),
        },
    );
    let mut summary = CosimSummary {
        steps: 0,
        final_t_a: 0.0,
        final_t_b: 0.0,
        clocks_equal: true,
        clock_records: 0,
        vehicle_records: 0,
        vehicles: paths.len(),
        vehicles_arrived: 0,
        resync_count: 0,
        resync_events: Vec::new(),
        max_sync_error: 0.0,
        max_post_sync_error: 0.0,
        transport,
        framing: config.framing,
    };
    let mut events = Vec::new();
    for _ in 0..config.max_steps {
        let out = lockstep.step()?;
        summary.steps = out.n;
        summary.final_t_a = out.t_a;
        summary.final_t_b = out.t_b;
        summary.clocks_equal &= out.t_a.to_bits() == out.t_b.to_bits();
        for r in &out.records {
            match r {
                TraceRecord::Clock { .. } => summary.clock_records += 1,
                TraceRecord::Vehicle { sync_error, post_sync_error, .. } => {
                    summary.vehicle_records += 1;
                    summary.max_sync_error = summary.max_sync_error.max(*sync_error);
                    summary.max_post_sync_error = summary.max_post_sync_error.max(*post_sync_error);
                }
                TraceRecord::Header { .. } => {}
            }
            push_line(&mut trace, r);
        }
        for e in out.events {
            if e.action == SyncAction::Resync {
                summary.resync_events.push(e.clone());
            }
            events.push(e);
        }
    }
    summary.resync_count = summary.resync_events.len();
    summary.vehicles_arrived = lockstep.traffic.arrived;
    lockstep.finish()?;
    Ok(ScenarioOutcome { trace, summary, events })
}

/// Runs both endpoints for `config.max_steps` steps over `transport`. Endpoint
/// B runs on its own thread; both speak the same framed protocol.
pub fn run_scenario(
    net: &RoadNetwork3D,
    routes: &[Route],
    config: &SyncConfig,
    transport: Transport,
) -> Result<ScenarioOutcome, CosimError> {
    config.check()?;
    let paths = routes.iter().map(|r| RoutePath::build(net, r)).collect::<Result<Vec<_>, _>>()?;
    let surface = RoadSurface::new(net, config.snap_distance);
    let mut terrain = TerrainEndpoint {
        surface: &surface,
        paths: paths.iter().map(|p| (p.vehicle_id.clone(), p.clone())).collect(),
        vehicles: BTreeMap::new(),
        first_vehicle: paths.first().map(|p| p.vehicle_id.clone()),
        drift: config.drift_per_step,
        fault: config.fault,
        clock: LockstepClock::new(config.dt),
    };

    std::thread::scope(|scope| {
        let (a_result, b_result) = match transport {
            Transport::Memory => {
                let (a_end, b_end) = memory_pipe();
                let b = scope.spawn(move || terrain.serve(&mut Connection::new(b_end.reader, b_end.writer)));
                let a = drive(Connection::new(a_end.reader, a_end.writer), &surface, &paths, config, transport);
                (a, b.join())
            }
            Transport::Tcp => {
                let listener = TcpListener::bind("127.0.0.1:0")?;
                let addr = listener.local_addr()?;
                let b = scope.spawn(move || {
                    let (stream, _) = listener.accept()?;
                    stream.set_nodelay(true)?;
                    let reader = stream.try_clone()?;
                    terrain.serve(&mut Connection::new(reader, stream))
                });
                let a = TcpStream::connect(addr).map_err(CosimError::from).and_then(|stream| {
                    stream.set_nodelay(true)?;
                    let reader = stream.try_clone()?;
                    drive(Connection::new(reader, stream), &surface, &paths, config, transport)
                });
                (a, b.join())
            }
        };
        let b_result = b_result.map_err(|_| CosimError::Protocol("terrain endpoint panicked".into()))?;
        match (a_result, b_result) {
            (Ok(outcome), Ok(())) => Ok(outcome),
            // B's error is the root cause when A only saw the stream close
            (Err(CosimError::Protocol(_)) | Err(CosimError::Io(_)), Err(b)) => Err(b),
            (Err(a), _) => Err(a),
            (Ok(_), Err(b)) => Err(b),
        }
    })
}
