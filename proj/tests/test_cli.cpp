// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "unimatch/unimatch.hpp"

using namespace unimatch;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig =
    "[train]\n"
    "inner_steps = 2\n"
    "batch_tasks = 4\n"
    "meta_lr = 0.003\n"
    "max_epochs = 3\n"
    "[encoder]\n"
    "layers = 2\n"
    "hidden = 16\n"
    "[protocol]\n"
    "support_size = 10\n"
    "query_size = 16\n"
    "eval_repeats = 2\n";

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("unimatch_cli_" + std::to_string(::getpid()));
    fs::create_directories(root_);
    std::ofstream(root_ / "small.cfg") << kSmallConfig;
    Registry reg = synth_generate(8, 3, 40, 0);
    std::vector<TaskRecord> tasks;
    for (const TaskRecord& t : reg.tasks()) tasks.push_back(t);
    TaskRecord tiny = *reg.tasks(Split::kTest).front();
    tiny.id = "tiny";
    tiny.examples.resize(6);
    tasks.push_back(tiny);
    write_registry(Registry(std::move(tasks), {}), root_ / "data");

    cli::TrainArgs a;
    a.config = (root_ / "small.cfg").string();
    a.data = (root_ / "data").string();
    a.out = (root_ / "model.ckpt").string();
    std::ostringstream out, err;
    train_exit_ = cli::cmd_train(a, out, err);
    train_err_ = err.str();
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
  static int train_exit_;
  static std::string train_err_;
};

fs::path CliTest::root_;
int CliTest::train_exit_ = -1;
std::string CliTest::train_err_;

}  // namespace

TEST(Config, DefaultsMirrorPublishedHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.model.layers, 5u);
  EXPECT_EQ(c.model.hidden, 300u);
  EXPECT_EQ(c.model.encoder_dropout, 0.0);
  EXPECT_EQ(c.model.match_dropout, 0.1);
  EXPECT_TRUE(c.model.share_qk);
  EXPECT_TRUE(c.model.fusion_bias);
  EXPECT_EQ(c.heads, 1u);
  EXPECT_EQ(c.train.inner_lr, 0.05);
  EXPECT_EQ(c.train.inner_steps, 5u);
  EXPECT_EQ(c.train.meta_lr, 0.001);
  EXPECT_EQ(c.train.batch_tasks, 21u);
  EXPECT_EQ(c.eval_repeats, 10u);
}

TEST(Config, SerializeRoundTrip) {
  RunConfig c = parse_config(kSmallConfig);
  c.train.optimizer = OptimizerKind::kAdamW;
  c.train.weight_decay = 0.0123;
  c.train.protocol = Protocol::kUnbalanced;
  c.model.share_qk = false;
  c.taskrel.metric = taskrel::Metric::kEuclidean;
  c.taskrel.mode = taskrel::VectorMode::kMeanSupportEmbedding;
  c.taskrel.normalize = false;
  const std::string text = serialize(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(serialize(back), text);
  EXPECT_EQ(back.train.weight_decay, 0.0123);
  EXPECT_EQ(back.model.hidden, 16u);
  EXPECT_FALSE(back.model.share_qk);
}

TEST(Config, Rejections) {
  EXPECT_THROW(parse_config("[train]\ninner_lrr = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("[trian]\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nseed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nseed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[matcher]\nheads = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("[matcher]\nshare_qk = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("[encoder]\ndropout = 1.0\n"), ConfigError);
  EXPECT_NO_THROW(parse_config("# comment\n; another\n\n[train]\n  seed = 7  \n"));
  try {
    parse_config("[train]\n\ninner_lrr = 0.1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.config = parse_config(kSmallConfig);
  ck.epoch = 7;
  ck.seed = 99;
  ck.params = init_params(ck.config.model, 5);
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const Checkpoint ck = sample_checkpoint();
  const std::string bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.epoch, 7u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(serialize(back.config), serialize(ck.config));
  std::vector<double> a, b;
  visit_model(ck.params, [&](const std::string&, const ParamTensor& t) { a.insert(a.end(), t.values.begin(), t.values.end()); });
  visit_model(back.params, [&](const std::string&, const ParamTensor& t) { b.insert(b.end(), t.values.begin(), t.values.end()); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(b[i], static_cast<double>(static_cast<float>(a[i])));
    EXPECT_LE(std::abs(a[i] - b[i]), 1e-7 * std::max(1.0, std::abs(a[i])));
  }
}

TEST(Checkpoint, CorruptionDetected) {
  const std::string bytes = encode_checkpoint(sample_checkpoint());
  std::string flipped = bytes;
  flipped[flipped.size() - 10] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(flipped), CheckpointError);
  std::string meta_flip = bytes;
  meta_flip[20] ^= 0x20;
  EXPECT_THROW(decode_checkpoint(meta_flip), CheckpointError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{11}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, cut)), CheckpointError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), CheckpointError);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  Checkpoint ck = sample_checkpoint();
  ck.config.model.hidden = 8;
  try {
    decode_checkpoint(encode_checkpoint(ck));
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos);
  }
}

TEST(Cli, GuardedExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(cli::guarded(err, [] { return 0; }), 0);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw ConfigError("x"); }), 2);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw DataError("x"); }), 3);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw CheckpointError("x"); }), 3);
  EXPECT_EQ(cli::guarded(err, []() -> int { throw NumericalError("x"); }), 4);
  EXPECT_NE(err.str().find("numerical error"), std::string::npos);
}

TEST_F(CliTest, TrainWritesCheckpointAndLog) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  EXPECT_TRUE(fs::exists(root_ / "model.ckpt"));
  const auto log = lines_of(slurp(root_ / "model.ckpt.log.csv"));
  ASSERT_EQ(log.size(), 4u);
  EXPECT_EQ(log[0], "epoch,mean_outer_loss,wall_seconds,val_metric");
  EXPECT_EQ(cells(log[1])[0], "1");
  EXPECT_EQ(load_checkpoint((root_ / "model.ckpt").string()).epoch, 3u);
}

TEST_F(CliTest, TrainFiveEpochs) {
  cli::TrainArgs a;
  a.config = (root_ / "small.cfg").string();
  a.data = (root_ / "data").string();
  a.out = (root_ / "five.ckpt").string();
  a.epochs = 5;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_train(a, out, err), 0) << err.str();
  EXPECT_TRUE(fs::exists(root_ / "five.ckpt"));
  EXPECT_EQ(lines_of(slurp(root_ / "five.ckpt.log.csv")).size(), 6u);
}

TEST_F(CliTest, TrainErrors) {
  std::ostringstream out, err;
  cli::TrainArgs a;
  a.config = (root_ / "small.cfg").string();
  a.data = (root_ / "no_such_dir").string();
  a.out = (root_ / "x.ckpt").string();
  EXPECT_EQ(cli::cmd_train(a, out, err), 3);
  std::ofstream(root_ / "typo.cfg") << "[train]\nmeta_lrr = 0.1\n";
  a.config = (root_ / "typo.cfg").string();
  a.data = (root_ / "data").string();
  EXPECT_EQ(cli::cmd_train(a, out, err), 2);
  EXPECT_NE(err.str().find("meta_lrr"), std::string::npos);
  a.config = (root_ / "missing.cfg").string();
  EXPECT_EQ(cli::cmd_train(a, out, err), 2);
}

TEST_F(CliTest, EvalTable) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  cli::EvalArgs a;
  a.ckpt = (root_ / "model.ckpt").string();
  a.data = (root_ / "data").string();
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_eval(a, out, err), 0) << err.str();
  const auto rows = lines_of(out.str());
  const auto header = cells(rows.front());
  EXPECT_EQ(header.size(), 13u);
  EXPECT_EQ(header[5], "auroc_se");
  ASSERT_EQ(rows.size(), 1u + 4u + 1u);
  bool saw_tiny = false;
  for (const auto& r : rows) {
    const auto c = cells(r);
    EXPECT_EQ(c.size(), header.size()) << r;
    if (c[0] == "tiny") {
      saw_tiny = true;
      EXPECT_EQ(c[1], "skipped");
    }
  }
  EXPECT_TRUE(saw_tiny);
  EXPECT_NE(err.str().find("skipped tiny"), std::string::npos);
  const auto last = cells(rows.back());
  EXPECT_EQ(last[0], "OVERALL");
  EXPECT_EQ(last[3], "3");
  const double auroc = std::stod(last[4]);
  EXPECT_GE(auroc, 0.0);
  EXPECT_LE(auroc, 1.0);

  a.repeats = 1;
  std::ostringstream out1, err1;
  ASSERT_EQ(cli::cmd_eval(a, out1, err1), 0);
  const auto h1 = cells(lines_of(out1.str()).front());
  EXPECT_EQ(h1.size(), 7u);
  for (const auto& col : h1) EXPECT_EQ(col.find("_se"), std::string::npos);

  std::ostringstream out2, err2;
  a.repeats = 2;
  ASSERT_EQ(cli::cmd_eval(a, out2, err2), 0);
  EXPECT_EQ(out2.str(), out.str());

  a.support_size = 500;
  std::ostringstream out3, err3;
  EXPECT_EQ(cli::cmd_eval(a, out3, err3), 3);
  a.support_size.reset();
  a.ckpt = (root_ / "absent.ckpt").string();
  EXPECT_EQ(cli::cmd_eval(a, out3, err3), 3);
}

TEST_F(CliTest, PredictRows) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  {
    std::ofstream s(root_ / "support.jsonl");
    s << R"({"smiles": "CCO", "label": 1})" << "\n"
      << R"({"smiles": "CCCO", "label": 1})" << "\n"
      << R"({"smiles": "CCC", "label": 0})" << "\n"
      << R"({"smiles": "c1ccccc1", "label": 0})" << "\n";
    std::ofstream q(root_ / "query.txt");
    q << "CCOC\nC1CC\nCCOC\nNCCO\n";
  }
  cli::PredictArgs a;
  a.ckpt = (root_ / "model.ckpt").string();
  a.support = (root_ / "support.jsonl").string();
  a.query = (root_ / "query.txt").string();
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_predict(a, out, err), 0) << err.str();
  const auto rows = lines_of(out.str());
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "smiles,p_positive,status");
  EXPECT_EQ(cells(rows[1])[1], cells(rows[3])[1]);
  EXPECT_EQ(cells(rows[2])[1], "");
  EXPECT_NE(cells(rows[2])[2].find("error"), std::string::npos);
  for (int i : {1, 3, 4}) {
    const double p = std::stod(cells(rows[i])[1]);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
  EXPECT_NE(err.str().find("1 failed"), std::string::npos);

  std::ofstream(root_ / "bad_query.txt") << "C1CC\n((\n";
  a.query = (root_ / "bad_query.txt").string();
  std::ostringstream out2, err2;
  EXPECT_EQ(cli::cmd_predict(a, out2, err2), 3);
}

TEST_F(CliTest, PredictSingleClassSupportIsConstant) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  std::ofstream(root_ / "pos.jsonl") << R"({"smiles": "CCO", "label": 1})" << "\n"
                                     << R"({"smiles": "CCN", "label": 1})" << "\n";
  std::ofstream(root_ / "q2.txt") << "CCOC\nc1ccccc1O\nCCCCCCl\n";
  cli::PredictArgs a;
  a.ckpt = (root_ / "model.ckpt").string();
  a.support = (root_ / "pos.jsonl").string();
  a.query = (root_ / "q2.txt").string();
  a.no_finetune = true;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_predict(a, out, err), 0);
  EXPECT_NE(err.str().find("single class"), std::string::npos);
  const auto rows = lines_of(out.str());
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(cells(rows[1])[1], cells(rows[2])[1]);
  EXPECT_EQ(cells(rows[1])[1], cells(rows[3])[1]);
}

TEST_F(CliTest, TaskRelMatrix) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  cli::TaskRelArgs a;
  a.ckpt = (root_ / "model.ckpt").string();
  a.data = (root_ / "data").string();
  a.out = (root_ / "rel.csv").string();
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_taskrel(a, out, err), 0) << err.str();
  const auto rows = lines_of(slurp(root_ / "rel.csv"));
  ASSERT_EQ(rows.size(), 9u);
  std::vector<std::vector<double>> m;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto c = cells(rows[i]);
    m.emplace_back();
    for (std::size_t j = 1; j < c.size(); ++j) m.back().push_back(std::stod(c[j]));
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_NEAR(m[i][i], 1.0, 1e-9);
    for (std::size_t j = 0; j < m.size(); ++j) EXPECT_EQ(m[i][j], m[j][i]);
  }
  EXPECT_TRUE(fs::exists(root_ / "rel.normalized.csv"));
  const auto meta = nlohmann::json::parse(slurp(root_ / "rel.meta.jsonl"));
  EXPECT_EQ(meta["metric"], "cosine");
  EXPECT_EQ(meta["tasks"], 8);

  a.metric = "euclidean";
  a.out = (root_ / "rel_e.csv").string();
  ASSERT_EQ(cli::cmd_taskrel(a, out, err), 0);
  const auto erows = lines_of(slurp(root_ / "rel_e.csv"));
  for (std::size_t i = 1; i < erows.size(); ++i) EXPECT_EQ(std::stod(cells(erows[i])[i]), 0.0);

  a.metric = "manhattan";
  EXPECT_EQ(cli::cmd_taskrel(a, out, err), 2);
}

TEST_F(CliTest, ExportEmbeddings) {
  ASSERT_EQ(train_exit_, 0) << train_err_;
  std::ofstream(root_ / "ten.txt") << "CCO\nCCN\nCCC\nc1ccccc1\nCC(=O)O\nCCCl\nOCCO\nC1CCCCC1\nCC#N\nCCOC\n";
  cli::ExportArgs a;
  a.ckpt = (root_ / "model.ckpt").string();
  a.smiles = (root_ / "ten.txt").string();
  a.out = (root_ / "emb.csv").string();
  a.pca = 2;
  std::ostringstream out, err;
  ASSERT_EQ(cli::cmd_export_embeddings(a, out, err), 0) << err.str();
  const std::string first = slurp(root_ / "emb.csv");
  const auto rows = lines_of(first);
  ASSERT_EQ(rows.size(), 1u + 10u * 2u);
  EXPECT_EQ(cells(rows[0]).size(), 3u + 16u);
  const auto pca = lines_of(slurp(root_ / "emb.pca.csv"));
  ASSERT_EQ(pca.size(), 1u + 10u * 2u);
  EXPECT_EQ(cells(pca[0]).size(), 5u);
  const std::string first_pca = slurp(root_ / "emb.pca.csv");
  ASSERT_EQ(cli::cmd_export_embeddings(a, out, err), 0);
  EXPECT_EQ(slurp(root_ / "emb.csv"), first);
  EXPECT_EQ(slurp(root_ / "emb.pca.csv"), first_pca);

  std::ofstream(root_ / "broken.txt") << "CCO\nC1CC\n";
  a.smiles = (root_ / "broken.txt").string();
  EXPECT_EQ(cli::cmd_export_embeddings(a, out, err), 3);
}
