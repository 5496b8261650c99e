#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "rbg/training.hpp"
#include "support.hpp"

using namespace rbg;

namespace {

TrainConfig toy_train_config()
{
    TrainConfig c;
    c.learning_rate = 3e-3;
    c.weight_decay = 0.0;
    c.batch_size = 2;
    c.max_steps = 40;
    c.eval_interval = 20;
    c.k = 3;
    c.seed = 7;
    c.d_model = 16;
    c.heads = 2;
    c.ffn_dim = 32;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.reader_layers = 1;
    c.max_source = 64;
    c.beam_size = 1;
    c.max_target = 12;
    c.gate_warmup = 0;
    return c;
}

RetrieveFn retriever(const test::CopyTask& task)
{
    return [&task](const Question& q, std::size_t k) { return task.retrieve(q, k); };
}

std::string temp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST(Config, ParsesFlatKeyValues)
{
    std::istringstream in("# toy run\nlearning_rate = 0.001\nbatch_size=8\nno_reader = true\ncopy_norm = raw-renorm\n\n");
    const auto c = parse_train_config(in);
    EXPECT_EQ(c.learning_rate, 0.001);
    EXPECT_EQ(c.batch_size, 8u);
    EXPECT_TRUE(c.no_reader);
    EXPECT_EQ(c.copy_norm, "raw-renorm");
    EXPECT_EQ(c.eval_interval, 500u);
    EXPECT_EQ(c.k, 10u);
    EXPECT_EQ(c.gate_warmup, 100u);
    EXPECT_EQ(c.weight_decay, 0.01);

    std::istringstream unknown("bogus = 1\n");
    EXPECT_THROW(parse_train_config(unknown), std::invalid_argument);
    std::istringstream bad("batch_size = many\n");
    EXPECT_THROW(parse_train_config(bad), std::invalid_argument);

    TrainConfig both;
    both.no_reader = true;
    both.reader_frozen = true;
    EXPECT_THROW(both.validate(), std::invalid_argument);
    TrainConfig zero;
    zero.batch_size = 0;
    EXPECT_THROW(zero.validate(), std::invalid_argument);
}

TEST(Train, OverfitsEightVerbatimAnswers)
{
    const auto task = test::copy_task(1, 8, 0);
    auto cfg = toy_train_config();
    cfg.max_steps = 500;
    cfg.eval_interval = 500;
    cfg.gate_warmup = 100;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    const double initial = t.training_loss();
    t.run();
    const double final_loss = t.training_loss();
    EXPECT_LT(final_loss, 0.2 * initial) << initial << " -> " << final_loss;
}

TEST(Train, FrozenReaderIsUntouched)
{
    const auto task = test::copy_task(2, 10, 2);
    auto cfg = toy_train_config();
    cfg.reader_frozen = true;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    const auto before = t.model().reader_hash();
    const auto gen_before = t.model().params().hash("gen.");
    t.run();
    EXPECT_EQ(t.model().reader_hash(), before);
    EXPECT_NE(t.model().params().hash("gen."), gen_before);
}

TEST(Train, NoReaderNeverEvaluatesTheGate)
{
    const auto task = test::copy_task(3, 10, 2);
    auto cfg = toy_train_config();
    cfg.no_reader = true;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    const auto before = t.model().reader_hash();
    t.run();
    EXPECT_EQ(t.stats().gate_evaluations, 0u);
    EXPECT_EQ(t.stats().reader_calls, 0u);
    EXPECT_EQ(t.model().reader_hash(), before);

    Trainer<double> full(toy_train_config(), task.corpus, task.train, task.valid, retriever(task));
    full.run(2);
    EXPECT_GT(full.stats().gate_evaluations, 0u);
    EXPECT_GT(full.stats().reader_calls, 0u);
}

TEST(Train, WarmupHoldsTheGateOpen)
{
    const auto task = test::copy_task(3, 10, 0);
    auto cfg = toy_train_config();
    cfg.gate_warmup = 5;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    const auto before = t.model().reader_hash();
    t.run(5);
    EXPECT_EQ(t.stats().gate_evaluations, 0u);
    EXPECT_EQ(t.model().reader_hash(), before);
    t.run(6);
    EXPECT_GT(t.stats().gate_evaluations, 0u);
    EXPECT_NE(t.model().reader_hash(), before);
}

TEST(Train, RandomRetrievalOnlyAtInference)
{
    const auto task = test::copy_task(4, 12, 4);
    auto cfg = toy_train_config();
    cfg.random_retrieval = true;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    for (std::size_t i = 0; i < task.train.size(); ++i) {
        const auto want = task.retrieve(task.train[i], 3);
        ASSERT_EQ(t.train_docs(i).size(), 3u);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(t.train_docs(i)[j]->doc_id, want.docs[j].doc_id);
        }
    }
    bool any_differs = false;
    for (std::size_t i = 0; i < task.valid.size(); ++i) {
        const auto want = task.retrieve(task.valid[i], 3);
        for (std::size_t j = 0; j < 3; ++j) {
            any_differs |= t.valid_docs(i)[j]->doc_id != want.docs[j].doc_id;
        }
    }
    EXPECT_TRUE(any_differs);
}

TEST(Train, ResumeIsBitExact)
{
    const auto task = test::copy_task(5, 10, 3);
    auto cfg = toy_train_config();
    cfg.max_steps = 200;
    cfg.eval_interval = 50;
    cfg.batch_size = 1;

    Trainer<double> straight(cfg, task.corpus, task.train, task.valid, retriever(task));
    straight.run();

    Trainer<double> first(cfg, task.corpus, task.train, task.valid, retriever(task));
    first.run(100);
    const auto path = temp("rbg_resume.state");
    first.save_state(path);

    Trainer<double> resumed(cfg, task.corpus, task.train, task.valid, retriever(task));
    resumed.restore_state(path);
    EXPECT_EQ(resumed.step(), 100u);
    resumed.run();

    ASSERT_EQ(resumed.losses().size(), 200u);
    EXPECT_EQ(resumed.losses(), straight.losses());
    EXPECT_EQ(resumed.best_step(), straight.best_step());
    EXPECT_EQ(resumed.best_metric(), straight.best_metric());
    for (std::size_t i = 0; i < straight.model().params().size(); ++i) {
        EXPECT_TRUE(resumed.model().params()[i].value == straight.model().params()[i].value);
    }

    // Saving and reloading a state reproduces the same bytes.
    const auto again = temp("rbg_resume2.state");
    resumed.save_state(again);
    Trainer<double> reread(cfg, task.corpus, task.train, task.valid, retriever(task));
    reread.restore_state(again);
    const auto third = temp("rbg_resume3.state");
    reread.save_state(third);
    EXPECT_EQ(file_hash(again), file_hash(third));
}

TEST(Train, CheckpointPreservesValidationMetric)
{
    const auto task = test::copy_task(6, 10, 3);
    Trainer<double> t(toy_train_config(), task.corpus, task.train, task.valid, retriever(task));
    t.run();
    const auto path = temp("rbg_train.ckpt");
    save_checkpoint(path, t.model());
    auto loaded = load_checkpoint<double>(path);
    Trainer<double> check(toy_train_config(), task.corpus, task.train, task.valid, retriever(task), std::move(loaded));
    EXPECT_EQ(check.validate(), t.validate());
}

TEST(Train, NonFiniteLossAbortsWithBatchDump)
{
    const auto task = test::copy_task(7, 6, 0);
    Trainer<double> t(toy_train_config(), task.corpus, task.train, task.valid, retriever(task));
    t.model().params()[t.model().generator().lm_head.bias].value.setConstant(std::nan(""));
    try {
        t.train_step();
        FAIL();
    } catch (const NonFiniteLoss& e) {
        EXPECT_NE(std::string(e.what()).find("\"id\":\"q"), std::string::npos) << e.what();
    }
}

TEST(Train, BestCheckpointTiesKeepTheEarlierStep)
{
    const auto task = test::copy_task(8, 6, 2);
    auto cfg = toy_train_config();
    cfg.learning_rate = 1e-12;  // parameters barely move, so validation scores tie
    cfg.max_steps = 30;
    cfg.eval_interval = 10;
    Trainer<double> t(cfg, task.corpus, task.train, task.valid, retriever(task));
    t.run();
    EXPECT_EQ(t.best_step(), 10u);
}

TEST(Ablate, VariantsMapOntoFlags)
{
    TrainConfig base;
    base.from_pretrained = "x.ckpt";
    EXPECT_TRUE(ablation_config(base, "no_reader").no_reader);
    EXPECT_EQ(ablation_config(base, "no_reader").from_pretrained, "x.ckpt");
    EXPECT_TRUE(ablation_config(base, "no_pretrain").from_pretrained.empty());
    EXPECT_TRUE(ablation_config(base, "no_both").no_reader);
    EXPECT_TRUE(ablation_config(base, "no_both").from_pretrained.empty());
    EXPECT_TRUE(ablation_config(base, "reader_frozen").reader_frozen);
    EXPECT_TRUE(ablation_config(base, "random_retrieval").random_retrieval);
    EXPECT_THROW(ablation_config(base, "w/o everything"), std::invalid_argument);
}

TEST(Ablate, ProducesAReport)
{
    const auto task = test::copy_task(9, 8, 3);
    auto cfg = toy_train_config();
    cfg.max_steps = 10;
    const auto r = ablate<double>(cfg, "no_reader", task.corpus, task.train, task.valid, retriever(task));
    EXPECT_EQ(r.report.records.size(), 3u);
    EXPECT_EQ(r.stats.gate_evaluations, 0u);
    EXPECT_TRUE(r.report.means.r_precision.has_value());
}
