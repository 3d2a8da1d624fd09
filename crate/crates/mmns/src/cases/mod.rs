pub mod config;
pub mod obstacle_opt;
pub mod taylor_green;
pub mod turek;
