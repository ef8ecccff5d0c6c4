fn main() {
    std::process::exit(aoi_sched::harness::cli_main(std::env::args_os()));
}
