// dehaze: synth | train | infer | eval
//
// Exit codes: 0 ok, 1 config, 2 I/O, 3 routing, 4 numeric.

#include <iostream>

#include "CLI11.hpp"
#include "dehaze/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 1, kIo = 2, kRouting = 3, kNumeric = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "key = value config file");
  cmd->add_option("-s,--set", c.overrides, "override, key=value (repeatable)");
}

dehaze::Settings resolve(const Common& c) {
  dehaze::Config cfg = c.config_path.empty() ? dehaze::Config{} : dehaze::Config::from_file(c.config_path);
  for (const auto& o : c.overrides) cfg.set(o);
  std::cout << "# resolved config\n" << cfg.resolved() << std::flush;
  return dehaze::Settings::from(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop, instruction- and feedback-guided image dehazing"};
  app.require_subcommand(1);

  Common synth_o, train_o, infer_o, eval_o;
  auto* synth = app.add_subcommand("synth", "write a procedural hazy dataset");
  add_common(synth, synth_o);
  auto* train = app.add_subcommand("train", "train stage 1 (IDN) or stage 2 (TFGA + IGM)");
  add_common(train, train_o);
  auto* infer = app.add_subcommand("infer", "dehaze one image, guided by an instruction");
  add_common(infer, infer_o);
  std::string image, instruction, output = "dehazed.png";
  infer->add_option("image", image, "hazy input (PNG or PPM)")->required();
  infer->add_option("-i,--instruction", instruction, "task instruction, e.g. \"segment the scene\"")->required();
  infer->add_option("-o,--out", output, "output image");
  auto* eval = app.add_subcommand("eval", "write the per-image metric report");
  add_common(eval, eval_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (synth->parsed()) dehaze::run_synth(resolve(synth_o), std::cout);
    if (train->parsed()) dehaze::run_train(resolve(train_o), std::cout);
    if (infer->parsed()) {
      auto r = dehaze::run_infer(resolve(infer_o), image, instruction, output, std::cout, std::cerr);
      for (const auto& e : r.trace)
        std::cout << "iteration " << e.iteration << " task " << e.task << " mean_change " << e.mean_change << '\n';
    }
    if (eval->parsed()) dehaze::run_eval(resolve(eval_o), std::cout);
  } catch (const dehaze::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const dehaze::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const dehaze::RoutingError& e) {
    std::cerr << "routing error: " << e.what() << '\n';
    return kRouting;
  } catch (const dehaze::LookupError& e) {
    std::cerr << "routing error: " << e.what() << '\n';
    return kRouting;
  } catch (const dehaze::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const dehaze::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
  return kOk;
}
