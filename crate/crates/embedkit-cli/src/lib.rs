//! Library surface of the `embedkit` binary, split out so integration tests
//! can drive commands directly.

pub mod args;
pub mod cmds;
pub mod config;
pub mod errors;
pub mod pipeline;
pub mod provenance;
pub mod tasks;

use errors::CliResult;

pub fn run(cli: args::Cli) -> CliResult<()> {
    match cli.command {
        args::Command::Compress(a) => cmds::cmd_compress(a),
        args::Command::Quality(a) => cmds::cmd_quality(a),
        args::Command::Search(a) => cmds::cmd_search(a),
        args::Command::Refine(a) => cmds::cmd_refine(a),
        args::Command::Compose(a) => cmds::cmd_compose(a),
        args::Command::Evaluate(a) => cmds::cmd_evaluate(a),
        args::Command::Adapt(a) => cmds::cmd_adapt(a),
        args::Command::Caption(a) => cmds::cmd_caption(a),
        args::Command::Pipeline(a) => cmds::cmd_pipeline(a),
    }
}
