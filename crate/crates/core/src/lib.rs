//! Diskless network-boot services.
//!
//! A PXE client is walked from its first DHCP broadcast to a running OS:
//! [`dhcp_server`] hands out a lease plus the boot server and bootfile,
//! [`tftp_server`] delivers bootloader, bootloader config, kernel and
//! initrd, and [`image_service`] streams the read-only OS image over HTTP.
//! All three read from one [`asset_store`], which mirrors a remote catalog
//! and switches versions atomically. [`boot_session`] follows each client
//! through the sequence and [`sim`] provides a software PXE client used as
//! the end-to-end oracle.

pub mod asset_store;
pub mod boot_session;
pub mod clock;
pub mod config;
pub mod context;
pub mod deploykit;
pub mod dhcp_server;
pub mod image_service;
pub mod netproto;
pub mod pins;
pub mod server;
pub mod sim;
pub mod tftp_server;

#[cfg(test)]
mod testutil;
