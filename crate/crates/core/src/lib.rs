//! Transit information assistant built around a chat-completion model.
//!
//! Structured transit data (GTFS schedules and service alerts) and
//! unstructured policy documents are turned into rider- and staff-facing
//! text by three pipelines:
//!
//! * [`tweet`] drafts social-media posts from service alerts through a
//!   tool-using reasoning loop ([`agent`]) and holds them for human review.
//! * [`trip`] runs a slot-filling conversation, queries the schedule and
//!   filters the alerts that matter to the rider.
//! * [`policy`] answers policy questions from a small vector index
//!   ([`vector`]).
//!
//! [`hub`] routes chat messages between the three with one shared history.
//! Every model call goes through [`llm::Gateway`], which has a scripted
//! backend so the whole crate is testable offline.

pub mod agent;
pub mod alerts;
pub mod config;
pub mod extract;
pub mod gtfs;
pub mod hub;
pub mod llm;
pub mod policy;
pub mod textmatch;
pub mod time;
pub mod trip;
pub mod tweet;
pub mod vector;
