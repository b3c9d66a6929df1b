//! Binds devices and the shared backhaul to the event scheduler.

use thiserror::Error;

use crate::firmware::{Backhaul, Device, FirmwareError, Step};
use crate::simcore::{EntityId, Event, ScheduleError, Scheduler, SchedulerStats, SimTime};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("device {device}: {source}")]
    Device {
        device: String,
        #[source]
        source: FirmwareError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("no device with index {0}")]
    NoDevice(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceEvent {
    pub step: Step,
    pub generation: u32,
}

pub struct World {
    scheduler: Scheduler<DeviceEvent>,
    pub devices: Vec<Device>,
    pub backhaul: Backhaul,
}

impl World {
    /// Queues each device's first wake-up.
    pub fn new(devices: Vec<Device>, backhaul: Backhaul) -> Result<Self, WorldError> {
        let mut w = World {
            scheduler: Scheduler::new(),
            devices,
            backhaul,
        };
        for i in 0..w.devices.len() {
            let at = SimTime(w.devices[i].profile.first_wake_ms);
            w.push(i, at, Step::Wake)?;
        }
        Ok(w)
    }

    fn push(&mut self, idx: usize, at: SimTime, step: Step) -> Result<(), WorldError> {
        let generation = self.devices[idx].generation();
        self.scheduler.schedule(Event::new(
            at,
            EntityId(idx as u32),
            DeviceEvent { step, generation },
        ))?;
        Ok(())
    }

    /// Schedules a power loss on device `idx`.
    pub fn schedule_power_loss(&mut self, idx: usize, at: SimTime) -> Result<(), WorldError> {
        if idx >= self.devices.len() {
            return Err(WorldError::NoDevice(idx));
        }
        self.push(idx, at, Step::PowerLoss)
    }

    pub fn now(&self) -> SimTime {
        self.scheduler.now()
    }

    pub fn scheduler_stats(&self) -> SchedulerStats {
        self.scheduler.stats()
    }

    /// Runs every event before `end`, then settles all power chains at `end`.
    pub fn run(&mut self, end: SimTime) -> Result<u64, WorldError> {
        let devices = &mut self.devices;
        let backhaul = &mut self.backhaul;
        let mut failure: Option<WorldError> = None;
        let steps = self.scheduler.run_before(end, |sched, ev| {
            if failure.is_some() {
                return;
            }
            let idx = ev.target.0 as usize;
            let dev = &mut devices[idx];
            if !dev.accepts(ev.kind.step, ev.kind.generation) {
                return;
            }
            match dev.handle(ev.kind.step, ev.fire_at, backhaul) {
                Ok(next) => {
                    let generation = dev.generation();
                    for (at, step) in next {
                        if let Err(e) = sched.schedule(Event::new(
                            at,
                            ev.target,
                            DeviceEvent { step, generation },
                        )) {
                            failure = Some(e.into());
                            return;
                        }
                    }
                }
                Err(source) => {
                    failure = Some(WorldError::Device {
                        device: dev.name().to_string(),
                        source,
                    })
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for d in &mut self.devices {
            d.power.integrate(end).map_err(|e| WorldError::Device {
                device: d.name().to_string(),
                source: e.into(),
            })?;
        }
        Ok(steps)
    }
}
