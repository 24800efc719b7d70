#pragma once

#include <string>

#include "lat/config.hpp"

namespace lat {

// exit codes shared by the command layer
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNanBudget = 3;
constexpr int kExitIo = 4;

int cmd_gen_data(const Config& cfg);
int cmd_train(const Config& cfg, const std::string& resume_checkpoint = "");
int cmd_eval(const Config& cfg, const std::string& checkpoint_path, const std::string& out_path = "");
int cmd_relearn(const Config& cfg, const std::string& checkpoint_path);
int cmd_plot(const std::string& csv_path, const std::string& out_dir);

}  // namespace lat
