#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmil/training.hpp"

namespace cmil::report {

/// Training log CSV with header
/// epoch,step,total,triplet,ce,align,val_rank1,wall_time.
void write_training_log(const std::vector<training::TrainLogRow>& rows,
                        const std::string& path);
std::vector<training::TrainLogRow> read_training_log(const std::string& path);

/// Validation-row series (epoch, step, val_rank1, align); one row per
/// validated epoch.
void write_series_csv(const std::vector<training::TrainLogRow>& rows,
                      const std::string& path);

/// Two-series SVG plot: alignment over every step, val rank-1 at
/// validation steps.
void write_series_svg(const std::vector<training::TrainLogRow>& rows,
                      const std::string& path);

/// One row per log: best/final val rank-1 and final alignment. The Table
/// of record for accumulator comparisons.
void write_comparison_csv(
    const std::vector<std::pair<std::string,
                                std::vector<training::TrainLogRow>>>& logs,
    const std::string& path);

/// Trial table CSV with header trial_id,rung,epochs,objective,config.
void write_trial_table(const std::vector<training::TrialRow>& rows,
                       const std::string& path);
std::vector<training::TrialRow> read_trial_table(const std::string& path);

}  // namespace cmil::report
