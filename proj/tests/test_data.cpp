#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "heatsmooth/data.hpp"

using namespace heatsmooth;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("heatsmooth_" + name)).string();
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST(Data, BlobsDeterministicAndBalanced) {
  const auto a = make_blobs(50, 3, 2, 0.2, 9);
  const auto b = make_blobs(50, 3, 2, 0.2, 9);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.labels, b.labels);
  std::vector<int> counts(3, 0);
  for (int l : a.labels) ++counts[l];
  for (int c : counts) EXPECT_EQ(c, 50);
  EXPECT_NE(make_blobs(50, 3, 2, 0.2, 10).inputs, a.inputs);
}

TEST(Data, BlobsZeroSpreadSitsOnCentres) {
  const auto ds = make_blobs(4, 4, 2, 0.0, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double ang = 2.0 * std::numbers::pi * ds.labels[i] / 4.0;
    EXPECT_NEAR(ds.inputs.at(i, 0), std::cos(ang), 1e-15);
    EXPECT_NEAR(ds.inputs.at(i, 1), std::sin(ang), 1e-15);
  }
  const auto line = make_blobs(2, 3, 1, 0.0, 1);
  EXPECT_DOUBLE_EQ(line.inputs.at(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(line.inputs.at(2, 0), 0.0);
  EXPECT_DOUBLE_EQ(line.inputs.at(4, 0), 1.0);
}

TEST(Data, BlobsRejectsBadArguments) {
  EXPECT_THROW(make_blobs(10, 2, 65, 0.1, 1), InputError);
  EXPECT_THROW(make_blobs(10, 1, 2, 0.1, 1), InputError);
  EXPECT_THROW(make_blobs(10, 2, 2, -0.1, 1), InputError);
}

TEST(Data, TrainAndTestSplitsDiffer) {
  const auto tr = make_blobs(20, 2, 2, 0.3, 5, "train");
  const auto te = make_blobs(20, 2, 2, 0.3, 5, "test");
  for (std::size_t i = 0; i < tr.size(); ++i)
    for (std::size_t j = 0; j < te.size(); ++j) EXPECT_FALSE(tr.inputs.row_tensor(i) == te.inputs.row_tensor(j));
}

TEST(Data, Step1dInjectsOutlier) {
  Step1dOptions opt;
  opt.outlier = -0.4;
  const auto ds = make_step1d(40, 0.0, 3, opt);
  ASSERT_EQ(ds.size(), 41u);
  EXPECT_DOUBLE_EQ(ds.inputs[40], -0.4);
  EXPECT_EQ(ds.labels[40], 1);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(ds.labels[i], ds.inputs[i] > 0.0 ? 1 : 0);
  EXPECT_THROW(make_step1d(9, 0.0, 3), InputError);
  EXPECT_EQ(make_step1d(40, 0.0, 3, opt).inputs, ds.inputs);
}

TEST(Data, CsvRoundTripIsExact) {
  const auto ds = make_blobs(7, 3, 2, 0.37, 2);
  const auto path = temp_path("roundtrip.csv");
  save_dataset_csv(ds, path);
  const auto back = load_dataset_csv(path, 3);
  EXPECT_EQ(back.inputs, ds.inputs);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.num_classes, 3u);
  std::filesystem::remove(path);
}

TEST(Data, CsvErrors) {
  const auto empty = temp_path("empty.csv");
  write_file(empty, "");
  EXPECT_THROW(load_dataset_csv(empty), InputError);

  const auto bad = temp_path("bad.csv");
  write_file(bad, "x_0,label\n0.5,1\nabc,0\n");
  try {
    load_dataset_csv(bad);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }

  const auto range = temp_path("range.csv");
  write_file(range, "x_0,label\n0.5,1\n0.7,4\n");
  try {
    load_dataset_csv(range, 2);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("label 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_dataset_csv(temp_path("does_not_exist.csv")), InputError);
  for (const auto& p : {empty, bad, range}) std::filesystem::remove(p);
}
