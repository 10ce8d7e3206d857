use clap::Parser;

fn main() {
    let cli = battkit::cli::Cli::parse();
    match battkit::cli::run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("battkit: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
