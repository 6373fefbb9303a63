#pragma once

#include "optimas/config.hpp"
#include "optimas/corpus.hpp"
#include "optimas/counters.hpp"
#include "optimas/csv.hpp"
#include "optimas/diff.hpp"
#include "optimas/ear.hpp"
#include "optimas/error.hpp"
#include "optimas/gateway.hpp"
#include "optimas/harness.hpp"
#include "optimas/hash.hpp"
#include "optimas/ingest.hpp"
#include "optimas/insight.hpp"
#include "optimas/log.hpp"
#include "optimas/pipeline.hpp"
#include "optimas/process.hpp"
#include "optimas/prompt.hpp"
#include "optimas/server.hpp"
#include "optimas/text.hpp"
