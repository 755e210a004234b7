pub mod bench;
pub mod check;
pub mod client;
pub mod cluster;
pub mod entry;
pub mod flashlog;
pub mod ganged;
pub mod kv;
pub mod live;
pub mod medium;
pub mod multilog;
pub mod nvm;
pub mod payload;
pub mod raft;
pub mod request;
pub mod storage;
pub mod transport;
pub mod wire;
